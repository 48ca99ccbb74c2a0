//! Patient-level k-fold splits with an inner train/validation split.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PatientStudy;
use crate::quantify::DEFAULT_THRESHOLD;

/// Share of each fold's training patients held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub fold_of: BTreeMap<String, usize>,
    pub folds: Vec<FoldPartition>,
}

impl DatasetSplit {
    pub fn fold(&self, index: usize) -> Result<&FoldPartition> {
        self.folds.get(index).ok_or_else(|| {
            Error::Argument(format!("fold {index} out of range for {}-fold split", self.k))
        })
    }

    /// Checks patient-disjointness and that each patient is tested exactly once.
    pub fn check(&self) -> Result<()> {
        let mut tested = BTreeSet::new();
        for (f, part) in self.folds.iter().enumerate() {
            let train: BTreeSet<&String> = part.train.iter().collect();
            let val: BTreeSet<&String> = part.validation.iter().collect();
            let test: BTreeSet<&String> = part.test.iter().collect();
            if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
                return Err(Error::Validation(format!("fold {f} partitions overlap")));
            }
            if train.len() + val.len() + test.len() != self.fold_of.len() {
                return Err(Error::Validation(format!(
                    "fold {f} does not cover every patient"
                )));
            }
            for id in &part.test {
                if !tested.insert(id.clone()) {
                    return Err(Error::Validation(format!("{id} is tested twice")));
                }
                if self.fold_of.get(id) != Some(&f) {
                    return Err(Error::Validation(format!("{id} fold index mismatch")));
                }
            }
        }
        if tested.len() != self.fold_of.len() {
            return Err(Error::Validation("some patients are never tested".into()));
        }
        Ok(())
    }
}

/// Minimal view of a patient for fold construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldInput {
    pub patient_id: String,
    pub label: Option<bool>,
}

pub fn make_folds(studies: &[PatientStudy], k: usize, seed: u64, stratify: bool) -> Result<DatasetSplit> {
    let inputs: Vec<FoldInput> = studies
        .iter()
        .map(|s| FoldInput {
            patient_id: s.patient_id.clone(),
            label: s.reference_label(DEFAULT_THRESHOLD),
        })
        .collect();
    make_folds_from_labels(&inputs, k, seed, stratify)
}

/// Stratified assignment: patients are sorted by id, shuffled within their
/// stratum, then dealt round-robin into folds with one counter running across
/// strata, so fold sizes and per-fold positives each differ by at most one.
pub fn make_folds_from_labels(
    patients: &[FoldInput],
    k: usize,
    seed: u64,
    stratify: bool,
) -> Result<DatasetSplit> {
    if k == 0 {
        return Err(Error::Argument("number of folds must be positive".into()));
    }
    if patients.len() < k {
        return Err(Error::Argument(format!(
            "{} patients cannot fill {k} folds",
            patients.len()
        )));
    }
    let mut sorted: Vec<&FoldInput> = patients.iter().collect();
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].patient_id == w[1].patient_id) {
        return Err(Error::Argument(format!(
            "duplicate patient id {}",
            w[0].patient_id
        )));
    }

    let strata = split_strata(&sorted, stratify)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    let mut counter = 0usize;
    let mut shuffled_strata = Vec::with_capacity(strata.len());
    for mut stratum in strata {
        stratum.shuffle(&mut rng);
        for id in &stratum {
            fold_of.insert(id.clone(), counter % k);
            counter += 1;
        }
        shuffled_strata.push(stratum);
    }

    let folds = (0..k)
        .map(|f| {
            let test: Vec<String> = shuffled_strata
                .iter()
                .flatten()
                .filter(|id| fold_of[*id] == f)
                .cloned()
                .collect();
            let pool: Vec<Vec<String>> = shuffled_strata
                .iter()
                .map(|s| s.iter().filter(|id| fold_of[*id] != f).cloned().collect())
                .collect();
            let (train, validation) = split_validation(pool, seed, f);
            FoldPartition {
                train,
                validation,
                test,
            }
        })
        .collect();

    let split = DatasetSplit {
        k,
        seed,
        stratified: stratify,
        fold_of,
        folds,
    };
    split.check()?;
    Ok(split)
}

fn split_strata(sorted: &[&FoldInput], stratify: bool) -> Result<Vec<Vec<String>>> {
    if !stratify {
        return Ok(vec![sorted.iter().map(|p| p.patient_id.clone()).collect()]);
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for p in sorted {
        match p.label {
            Some(true) => positives.push(p.patient_id.clone()),
            Some(false) => negatives.push(p.patient_id.clone()),
            None => {
                return Err(Error::Argument(format!(
                    "stratified folds need a reference diagnosis or VT% for {}",
                    p.patient_id
                )))
            }
        }
    }
    Ok(vec![positives, negatives])
}

/// Picks validation patients at evenly spaced positions of the
/// stratum-ordered pool so both classes are represented proportionally.
fn split_validation(mut pool: Vec<Vec<String>>, seed: u64, fold: usize) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold as u64 + 1)));
    for stratum in &mut pool {
        stratum.shuffle(&mut rng);
    }
    let ordered: Vec<String> = pool.into_iter().flatten().collect();
    let n = ordered.len();
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n - 1)
    };
    let picks: BTreeSet<usize> = (0..n_val)
        .map(|j| (((j as f64 + 0.5) * n as f64) / n_val as f64).floor() as usize)
        .collect();
    let mut train = Vec::with_capacity(n - n_val);
    let mut validation = Vec::with_capacity(n_val);
    for (i, id) in ordered.into_iter().enumerate() {
        if picks.contains(&i) {
            validation.push(id);
        } else {
            train.push(id);
        }
    }
    (train, validation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize, positive_every: usize) -> Vec<FoldInput> {
        (0..n)
            .map(|i| FoldInput {
                patient_id: format!("pt{i:04}"),
                label: Some(i % positive_every == 0),
            })
            .collect()
    }

    #[test]
    fn fold_sizes_for_379_patients() {
        let split = make_folds_from_labels(&cohort(379, 3), 5, 11, true).unwrap();
        let mut sizes: Vec<usize> = split.folds.iter().map(|f| f.test.len()).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![76, 76, 76, 76, 75]);
    }

    #[test]
    fn one_patient_per_fold() {
        let split = make_folds_from_labels(&cohort(5, 2), 5, 0, true).unwrap();
        for f in &split.folds {
            assert_eq!(f.test.len(), 1);
            assert_eq!(f.train.len() + f.validation.len(), 4);
            assert_eq!(f.validation.len(), 1);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let c = cohort(37, 4);
        assert_eq!(
            make_folds_from_labels(&c, 5, 3, true).unwrap(),
            make_folds_from_labels(&c, 5, 3, true).unwrap()
        );
        assert_ne!(
            make_folds_from_labels(&c, 5, 3, true).unwrap().fold_of,
            make_folds_from_labels(&c, 5, 4, true).unwrap().fold_of
        );
    }

    #[test]
    fn too_few_patients() {
        assert!(matches!(
            make_folds_from_labels(&cohort(3, 2), 5, 0, false),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn stratification_needs_labels() {
        let mut c = cohort(10, 2);
        c[3].label = None;
        assert!(make_folds_from_labels(&c, 2, 0, true).is_err());
        assert!(make_folds_from_labels(&c, 2, 0, false).is_ok());
    }

    #[test]
    fn two_patients_two_folds() {
        let split = make_folds_from_labels(&cohort(2, 2), 2, 0, true).unwrap();
        for f in &split.folds {
            assert_eq!(f.train.len(), 1);
            assert!(f.validation.is_empty());
            assert_eq!(f.test.len(), 1);
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut c = cohort(6, 2);
        c[5].patient_id = c[0].patient_id.clone();
        assert!(make_folds_from_labels(&c, 2, 0, false).is_err());
    }
}
