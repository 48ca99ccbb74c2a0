//! Single-file SQLite store for sessions, slices and grades.
//!
//! Every grade write runs in one transaction that appends to the history
//! table and upserts the current record, with `synchronous = FULL` so an
//! acknowledged grade survives a crash.

use std::path::{Path, PathBuf};

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::summary::Grade;
use crate::ReviewError;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS sessions (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    seed INTEGER NOT NULL,
    created_ms INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS slices (
    session_id INTEGER NOT NULL REFERENCES sessions(id),
    position INTEGER NOT NULL,
    patient_id TEXT NOT NULL,
    slice_index INTEGER NOT NULL,
    overlay_path TEXT NOT NULL,
    PRIMARY KEY (session_id, patient_id, slice_index)
);
CREATE TABLE IF NOT EXISTS grades (
    session_id INTEGER NOT NULL,
    reviewer_id TEXT NOT NULL,
    patient_id TEXT NOT NULL,
    slice_index INTEGER NOT NULL,
    score REAL NOT NULL,
    timestamp_ms INTEGER NOT NULL,
    PRIMARY KEY (session_id, reviewer_id, patient_id, slice_index)
);
CREATE TABLE IF NOT EXISTS grade_history (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    session_id INTEGER NOT NULL,
    reviewer_id TEXT NOT NULL,
    patient_id TEXT NOT NULL,
    slice_index INTEGER NOT NULL,
    score REAL NOT NULL,
    timestamp_ms INTEGER NOT NULL
);
";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub patient_id: String,
    pub slice_index: u32,
    pub overlay_path: PathBuf,
}

/// Overlays of one patient, in slice order: `overlay_###.png` files inside
/// `<overlay_dir>/<patient_id>/`.
pub fn discover_overlays(overlay_dir: &Path, patient_id: &str) -> Vec<(u32, PathBuf)> {
    let dir = overlay_dir.join(patient_id);
    let Ok(entries) = std::fs::read_dir(&dir) else {
        return Vec::new();
    };
    let mut found: Vec<(u32, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let index = name.strip_prefix("overlay_")?.strip_suffix(".png")?.parse().ok()?;
            Some((index, e.path()))
        })
        .collect();
    found.sort();
    found
}

pub struct ReviewStore {
    conn: Connection,
}

impl ReviewStore {
    pub fn open(path: &Path) -> Result<ReviewStore, ReviewError> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(ReviewStore { conn })
    }

    pub fn create_session(&mut self, seed: u64, slices: &[SliceEntry], now_ms: i64) -> Result<i64, ReviewError> {
        let tx = self.conn.transaction()?;
        tx.execute(
            "INSERT INTO sessions (seed, created_ms) VALUES (?1, ?2)",
            params![seed as i64, now_ms],
        )?;
        let id = tx.last_insert_rowid();
        {
            let mut stmt = tx.prepare(
                "INSERT INTO slices (session_id, position, patient_id, slice_index, overlay_path)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            for (pos, s) in slices.iter().enumerate() {
                stmt.execute(params![
                    id,
                    pos as i64,
                    s.patient_id,
                    s.slice_index,
                    s.overlay_path.to_string_lossy()
                ])?;
            }
        }
        tx.commit()?;
        Ok(id)
    }

    pub fn session_seed(&self, session: i64) -> Result<Option<u64>, ReviewError> {
        Ok(self
            .conn
            .query_row("SELECT seed FROM sessions WHERE id = ?1", [session], |r| r.get::<_, i64>(0))
            .optional()?
            .map(|s| s as u64))
    }

    /// Slices in creation order.
    pub fn slices(&self, session: i64) -> Result<Vec<SliceEntry>, ReviewError> {
        let mut stmt = self.conn.prepare(
            "SELECT patient_id, slice_index, overlay_path FROM slices WHERE session_id = ?1 ORDER BY position",
        )?;
        let rows = stmt.query_map([session], |r| {
            Ok(SliceEntry {
                patient_id: r.get(0)?,
                slice_index: r.get(1)?,
                overlay_path: PathBuf::from(r.get::<_, String>(2)?),
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn overlay_path(&self, session: i64, patient_id: &str, slice_index: u32) -> Result<Option<PathBuf>, ReviewError> {
        Ok(self
            .conn
            .query_row(
                "SELECT overlay_path FROM slices WHERE session_id = ?1 AND patient_id = ?2 AND slice_index = ?3",
                params![session, patient_id, slice_index],
                |r| r.get::<_, String>(0),
            )
            .optional()?
            .map(PathBuf::from))
    }

    /// Replaces any earlier grade by the same reviewer for the same slice and
    /// keeps the old value in the history table.
    pub fn upsert_grade(&mut self, session: i64, grade: &Grade) -> Result<(), ReviewError> {
        let tx = self.conn.transaction()?;
        tx.execute(
            "INSERT INTO grade_history (session_id, reviewer_id, patient_id, slice_index, score, timestamp_ms)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                session,
                grade.reviewer_id,
                grade.patient_id,
                grade.slice_index,
                grade.score,
                grade.timestamp_ms
            ],
        )?;
        tx.execute(
            "INSERT INTO grades (session_id, reviewer_id, patient_id, slice_index, score, timestamp_ms)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)
             ON CONFLICT (session_id, reviewer_id, patient_id, slice_index)
             DO UPDATE SET score = excluded.score, timestamp_ms = excluded.timestamp_ms",
            params![
                session,
                grade.reviewer_id,
                grade.patient_id,
                grade.slice_index,
                grade.score,
                grade.timestamp_ms
            ],
        )?;
        tx.commit()?;
        Ok(())
    }

    fn read_grades(&self, sql: &str, session: i64) -> Result<Vec<Grade>, ReviewError> {
        let mut stmt = self.conn.prepare(sql)?;
        let rows = stmt.query_map([session], |r| {
            Ok(Grade {
                reviewer_id: r.get(0)?,
                patient_id: r.get(1)?,
                slice_index: r.get(2)?,
                score: r.get(3)?,
                timestamp_ms: r.get(4)?,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Current grades, one per (reviewer, patient, slice).
    pub fn grades(&self, session: i64) -> Result<Vec<Grade>, ReviewError> {
        self.read_grades(
            "SELECT reviewer_id, patient_id, slice_index, score, timestamp_ms FROM grades
             WHERE session_id = ?1 ORDER BY reviewer_id, patient_id, slice_index",
            session,
        )
    }

    /// Every submission, oldest first.
    pub fn history(&self, session: i64) -> Result<Vec<Grade>, ReviewError> {
        self.read_grades(
            "SELECT reviewer_id, patient_id, slice_index, score, timestamp_ms FROM grade_history
             WHERE session_id = ?1 ORDER BY id",
            session,
        )
    }
}
