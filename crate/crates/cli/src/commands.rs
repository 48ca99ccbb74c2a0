use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use lvtq_core::metrics::{
    confusion, diagnostic_stats, dice_with, roc_analysis, write_confusion_csv, write_roc_csv, write_stats_csv, CiMethod,
    EmptyDice,
};
use lvtq_core::overlay::render_overlay;
use lvtq_core::phantom::{generate_cohort_with, CohortTemplate, VtDistribution};
use lvtq_core::pngio;
use lvtq_core::quantify::{quantify_masks, quantify_study, write_quantification_csv, QuantificationRow};
use lvtq_core::segnet::UNet;
use lvtq_core::stats::MeanStd;
use lvtq_core::store::{self, mask_file};
use lvtq_core::trainer::{predict_masks, train_cv, PooledDice, TrainConfig};
use lvtq_core::{Class, LabelMask, PatientStudy, Population};

use crate::provenance::record;
use crate::{DistKind, EvaluateArgs, InferArgs, ServeArgs, SynthArgs, TrainArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn overlay_file(index: usize) -> String {
    format!("overlay_{index:03}.png")
}

pub fn synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let max = lvtq_core::model::MAX_CLINICAL_SLICES;
    if a.min_slices == 0 || a.min_slices > a.max_slices || a.max_slices > max {
        return Err(usage(format!("slice range must satisfy 1 <= min <= max <= {max}")));
    }
    let distribution = match a.vt_dist {
        DistKind::Uniform => VtDistribution::Uniform {
            low: a.vt_low,
            high: a.vt_high,
        },
        DistKind::Normal => VtDistribution::Normal {
            mean: a.vt_mean,
            std: a.vt_std,
        },
        DistKind::Bimodal => VtDistribution::Bimodal {
            low_mode: a.vt_low,
            high_mode: a.vt_high,
            std: a.vt_std,
            weight_high: a.vt_weight,
        },
    };
    let mut template = if a.shifted {
        CohortTemplate::shifted()
    } else {
        CohortTemplate::default()
    };
    template.image_size = a.image_size;
    template.slices = (a.min_slices, a.max_slices);
    if let Some(n) = a.noise {
        template.noise_sigma = n;
    }
    if let Some(d) = a.deformation {
        template.deformation = d;
    }
    if let Some(p) = a.population {
        template.population = p;
    }
    if let Some(prefix) = &a.id_prefix {
        template.id_prefix = prefix.clone();
    }
    let cohort = generate_cohort_with(&template, a.patients as usize, &distribution, a.seed).map_err(|e| match e {
        lvtq_core::Error::Argument(m) => usage(m),
        other => other.into(),
    })?;
    store::save_cohort(&cohort, &a.out).with_context(|| format!("writing cohort to {}", a.out.display()))?;
    println!("patient_id\tpopulation\tslices\treference_vt_percent\tlvnc");
    for s in &cohort {
        println!(
            "{}\t{}\t{}\t{:.3}\t{}",
            s.patient_id,
            s.population,
            s.num_slices(),
            s.reference_vt_percent.unwrap_or(f64::NAN),
            s.reference_diagnosis.unwrap_or(false)
        );
    }
    record(
        "synth",
        argv,
        Some(a.seed),
        Vec::new(),
        json!({ "template": template, "distribution": distribution, "patients": a.patients }),
    )
    .write(&a.out)?;
    Ok(())
}

fn load_cohort_filtered(dir: &Path, populations: &[Population]) -> Result<Vec<PatientStudy>> {
    if !dir.is_dir() {
        return Err(usage(format!("cohort directory {} does not exist", dir.display())));
    }
    let cohort = store::load_cohort(dir).with_context(|| format!("loading cohort {}", dir.display()))?;
    Ok(cohort
        .into_iter()
        .filter(|s| populations.is_empty() || populations.contains(&s.population))
        .collect())
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| usage(format!("cannot read config {}: {e}", a.config.display())))?;
    let mut config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", a.config.display())))?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let cohort = load_cohort_filtered(&a.cohort, &a.population)?;
    if cohort.is_empty() {
        return Err(usage(format!("no patients found in {}", a.cohort.display())));
    }
    let report = train_cv(&cohort, &config, &a.out, a.resume)?;
    println!("Fold-level Dice (mean ± std over {} folds)", report.folds.len());
    print!("{}", report.fold_level.table(4));
    println!("Slice-level Dice (mean ± std over held-out slices)");
    print!("{}", report.slice_level.table(4));
    if let Some(acc) = report.diagnosis_accuracy {
        println!("Diagnosis accuracy at {}%: {acc:.4}", config.threshold);
    }
    fs::write(
        a.out.join("cv_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    record(
        "train",
        argv,
        Some(config.seed),
        vec![a.config.clone(), a.cohort.clone()],
        json!({ "config": config, "resume": a.resume, "populations": a.population }),
    )
    .write(&a.out)?;
    Ok(())
}

pub fn infer(a: &InferArgs, argv: &[String]) -> Result<()> {
    if !a.threshold.is_finite() {
        return Err(usage("threshold must be finite"));
    }
    let mut net = UNet::from_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let mut rows = Vec::new();
    for dir in &a.studies {
        let study = store::load_study(dir).with_context(|| format!("loading study {}", dir.display()))?;
        let masks = predict_masks(&mut net, &study, 8)?;
        let out = a.out.join(&study.patient_id);
        fs::create_dir_all(&out)?;
        for (i, (mask, slice)) in masks.iter().zip(&study.slices).enumerate() {
            let (w, h) = mask.dims();
            pngio::write_gray8(&out.join(mask_file(i)), w, h, mask.labels())?;
            let rgb = render_overlay(&slice.image, mask, a.opacity);
            pngio::write_rgb8(&out.join(overlay_file(i)), w, h, &rgb)?;
        }
        let q = quantify_masks(&study, &masks, a.threshold)?;
        let row = QuantificationRow::new(&study, &q);
        write_quantification_csv(File::create(out.join("quantification.csv"))?, std::slice::from_ref(&row))?;
        println!(
            "{}\tVT% {:.2}\t{}",
            row.patient_id,
            row.vt_percent,
            if row.diagnosis { "LVNC" } else { "non-LVNC" }
        );
        rows.push(row);
    }
    write_quantification_csv(File::create(a.out.join("quantification.csv"))?, &rows)?;
    record(
        "infer",
        argv,
        None,
        std::iter::once(a.checkpoint.clone()).chain(a.studies.iter().cloned()).collect(),
        json!({ "threshold": a.threshold, "opacity": a.opacity }),
    )
    .write(&a.out)?;
    Ok(())
}

/// Predicted masks of one patient directory, in slice order.
fn read_predicted_masks(dir: &Path) -> Result<Vec<LabelMask>> {
    let mut masks = Vec::new();
    loop {
        let path = dir.join(mask_file(masks.len()));
        if !path.is_file() {
            break;
        }
        let png = pngio::read_gray(&path)?;
        let labels = png.samples.iter().map(|&v| v.min(255) as u8).collect();
        masks.push(LabelMask::from_vec(png.width, png.height, labels).with_context(|| path.display().to_string())?);
    }
    Ok(masks)
}

#[derive(Debug, Serialize)]
struct PatientRow {
    patient_id: String,
    population: Population,
    reference_vt_percent: f64,
    predicted_vt_percent: f64,
    vt_error: f64,
    reference_diagnosis: bool,
    predicted_diagnosis: bool,
}

#[derive(Debug, Serialize)]
struct SliceRow {
    patient_id: String,
    slice_index: usize,
    dice_cel: Option<f64>,
    dice_lvc: Option<f64>,
    dice_tz: Option<f64>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Confusion matrix, statistics and (when both classes occur) ROC files.
fn write_diagnostics(out: &Path, predicted: &[bool], reference: &[bool], scores: Option<&[f64]>, seed: u64) -> Result<serde_json::Value> {
    let m = confusion(predicted, reference)?;
    let stats = diagnostic_stats(&m);
    write_confusion_csv(File::create(out.join("confusion.csv"))?, &m)?;
    write_stats_csv(File::create(out.join("stats.csv"))?, "diagnosis", &stats)?;
    let mut roc_json = serde_json::Value::Null;
    if let Some(scores) = scores {
        match roc_analysis(scores, reference, CiMethod::bootstrap(seed)) {
            Ok(roc) => {
                write_roc_csv(File::create(out.join("roc.csv"))?, &roc)?;
                roc_json = json!({
                    "auc": roc.auc,
                    "auc_ci": roc.auc_ci,
                    "optimal_cutoff": roc.optimal_cutoff,
                    "optimal_sensitivity": roc.optimal_sensitivity,
                    "optimal_specificity": roc.optimal_specificity,
                });
            }
            Err(e) => eprintln!("warning: ROC skipped: {e}"),
        }
    }
    Ok(json!({ "confusion": m, "stats": stats, "roc": roc_json }))
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "lvnc" | "positive" => Some(true),
        "0" | "false" | "no" | "non-lvnc" | "negative" => Some(false),
        _ => None,
    }
}

fn evaluate_pairs(a: &EvaluateArgs, pairs: &Path, argv: &[String]) -> Result<()> {
    let mut reader = csv::Reader::from_path(pairs).map_err(|e| usage(format!("cannot read {}: {e}", pairs.display())))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(pc), Some(rc)) = (col("predicted"), col("reference")) else {
        return Err(usage("pairs file needs `predicted` and `reference` columns"));
    };
    let sc = col("score");
    let (mut predicted, mut reference, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| {
            parse_flag(rec.get(i).unwrap_or("")).ok_or_else(|| usage(format!("row {}: bad label in column {i}", line + 2)))
        };
        predicted.push(parse(pc)?);
        reference.push(parse(rc)?);
        if let Some(sc) = sc {
            let v: f64 = rec
                .get(sc)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| usage(format!("row {}: bad score", line + 2)))?;
            scores.push(v);
        }
    }
    if predicted.is_empty() {
        bail!("{} holds no label pairs", pairs.display());
    }
    fs::create_dir_all(&a.out)?;
    let diag = write_diagnostics(&a.out, &predicted, &reference, sc.map(|_| scores.as_slice()), a.seed)?;
    fs::write(a.out.join("eval_report.json"), serde_json::to_string_pretty(&diag)? + "\n")?;
    print_stats(&diag);
    record("evaluate", argv, Some(a.seed), vec![pairs.to_path_buf()], json!({ "mode": "pairs" })).write(&a.out)?;
    Ok(())
}

fn print_stats(diag: &serde_json::Value) {
    for key in ["accuracy", "sensitivity", "specificity", "ppv", "npv", "kappa"] {
        let v = &diag["stats"][key];
        match v.as_f64() {
            Some(x) => println!("{key:<12}{x:.4}"),
            None => println!("{key:<12}n/a"),
        }
    }
    if let Some(auc) = diag["roc"]["auc"].as_f64() {
        println!("{:<12}{auc:.4}", "auc");
    }
}

pub fn evaluate(a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    if !a.threshold.is_finite() {
        return Err(usage("threshold must be finite"));
    }
    if let Some(pairs) = &a.pairs {
        return evaluate_pairs(a, pairs, argv);
    }
    let (Some(pred_dir), Some(ref_dir)) = (&a.predictions, &a.references) else {
        return Err(usage("give --predictions with --references, or --pairs"));
    };
    if !pred_dir.is_dir() {
        return Err(usage(format!("predictions directory {} does not exist", pred_dir.display())));
    }
    let references = load_cohort_filtered(ref_dir, &a.population)?;
    let mut predicted_dirs: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(pred_dir)? {
        let path = entry?.path();
        if path.is_dir() && path.join(mask_file(0)).is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                predicted_dirs.insert(name.to_string(), path);
            }
        }
    }

    let mut unpaired: Vec<String> = Vec::new();
    let mut pooled = PooledDice::default();
    let mut slice_rows = Vec::new();
    let mut patient_rows = Vec::new();
    for study in &references {
        let Some(dir) = predicted_dirs.remove(&study.patient_id) else {
            unpaired.push(format!("{} (no prediction)", study.patient_id));
            continue;
        };
        let masks = read_predicted_masks(&dir)?;
        if masks.len() != study.num_slices() || !study.has_masks() {
            unpaired.push(format!(
                "{} ({} predicted slices for {} reference slices{})",
                study.patient_id,
                masks.len(),
                study.num_slices(),
                if study.has_masks() { "" } else { ", reference masks missing" }
            ));
            continue;
        }
        for (i, (pred, slice)) in masks.iter().zip(&study.slices).enumerate() {
            let truth = slice.mask.as_ref().expect("checked has_masks");
            let pred = if pred.dims() == truth.dims() {
                pred.clone()
            } else {
                lvtq_core::preprocess::resize_mask(pred, truth.width(), truth.height())?
            };
            pooled.add(&pred, truth);
            let d = |c: Class| dice_with(&pred, truth, c, EmptyDice::Skip);
            slice_rows.push(SliceRow {
                patient_id: study.patient_id.clone(),
                slice_index: i,
                dice_cel: d(Class::Cel)?,
                dice_lvc: d(Class::Lvc)?,
                dice_tz: d(Class::Tz)?,
            });
        }
        let pq = quantify_masks(study, &masks, a.threshold)?;
        let rq = quantify_study(study, a.threshold)?;
        patient_rows.push(PatientRow {
            patient_id: study.patient_id.clone(),
            population: study.population,
            reference_vt_percent: rq.vt_percent,
            predicted_vt_percent: pq.vt_percent,
            vt_error: (pq.vt_percent - rq.vt_percent).abs(),
            reference_diagnosis: rq.diagnosis,
            predicted_diagnosis: pq.diagnosis,
        });
    }
    unpaired.extend(predicted_dirs.keys().map(|k| format!("{k} (no reference)")));
    if !unpaired.is_empty() {
        eprintln!("warning: excluded unpaired patients: {}", unpaired.join(", "));
    }
    if patient_rows.is_empty() {
        bail!("no patient is present in both {} and {}", pred_dir.display(), ref_dir.display());
    }

    fs::create_dir_all(&a.out)?;
    write_csv(&a.out.join("dice_slices.csv"), &slice_rows)?;
    write_csv(&a.out.join("quantification.csv"), &patient_rows)?;

    let column = |f: fn(&SliceRow) -> Option<f64>| MeanStd::of(&slice_rows.iter().filter_map(f).collect::<Vec<_>>());
    let slice_level = [
        ("CEL", column(|r| r.dice_cel)),
        ("LVC", column(|r| r.dice_lvc)),
        ("TZ", column(|r| r.dice_tz)),
    ];
    let pooled = pooled.dice();
    let mut w = csv::Writer::from_path(a.out.join("dice_summary.csv"))?;
    w.write_record(["class", "slice_mean", "slice_std", "slices", "pooled"])?;
    for ((name, ms), pooled_value) in slice_level.iter().zip([pooled.cel, pooled.lvc, pooled.tz]) {
        let (m, s, n) = ms.map_or((String::new(), String::new(), 0), |v| (format!("{:.6}", v.mean), format!("{:.6}", v.std), v.n));
        w.write_record([name.to_string(), m, s, n.to_string(), format!("{pooled_value:.6}")])?;
    }
    w.flush()?;

    let predicted: Vec<bool> = patient_rows.iter().map(|r| r.predicted_diagnosis).collect();
    let reference: Vec<bool> = patient_rows.iter().map(|r| r.reference_diagnosis).collect();
    let scores: Vec<f64> = patient_rows.iter().map(|r| r.predicted_vt_percent).collect();
    let diag = write_diagnostics(&a.out, &predicted, &reference, Some(&scores), a.seed)?;
    let errors: Vec<f64> = patient_rows.iter().map(|r| r.vt_error).collect();
    let report = json!({
        "patients": patient_rows.len(),
        "excluded": unpaired,
        "threshold": a.threshold,
        "diagnosis": diag,
        "dice_pooled": pooled,
        "vt_error": MeanStd::of(&errors),
    });
    fs::write(a.out.join("eval_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    print_stats(&diag);
    for (name, ms) in slice_level {
        println!("Dice {name:<8}{}", ms.map_or("n/a".into(), |m| m.display(4)));
    }
    record(
        "evaluate",
        argv,
        Some(a.seed),
        vec![pred_dir.clone(), ref_dir.clone()],
        json!({ "mode": "masks", "threshold": a.threshold, "populations": a.population }),
    )
    .write(&a.out)?;
    Ok(())
}

pub fn serve(a: &ServeArgs, argv: &[String]) -> Result<()> {
    if !a.threshold.is_finite() {
        return Err(usage("threshold must be finite"));
    }
    let config = lvtq_review::ServiceConfig {
        default_threshold: a.threshold,
        ..Default::default()
    };
    let state = lvtq_review::AppState::open(&a.db, config).with_context(|| format!("opening {}", a.db.display()))?;
    let dir = a.db.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    record(
        "serve",
        argv,
        None,
        vec![a.db.clone()],
        json!({ "addr": a.addr.to_string(), "threshold": a.threshold }),
    )
    .write(dir)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    eprintln!("review service listening on http://{}", a.addr);
    runtime.block_on(lvtq_review::serve(a.addr, state))?;
    Ok(())
}
