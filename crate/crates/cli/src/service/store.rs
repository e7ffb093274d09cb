//! Review decisions and the run registry in one SQLite file.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::{params, Connection, OpenFlags, OptionalExtension, Row};
use serde::{Deserialize, Serialize};

use super::survey::LocalPoint;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    Corrected,
}

impl Verdict {
    fn as_str(self) -> &'static str {
        match self {
            Verdict::Accept => "accept",
            Verdict::Reject => "reject",
            Verdict::Corrected => "corrected",
        }
    }

    fn parse(s: &str) -> rusqlite::Result<Self> {
        match s {
            "accept" => Ok(Verdict::Accept),
            "reject" => Ok(Verdict::Reject),
            "corrected" => Ok(Verdict::Corrected),
            other => Err(rusqlite::Error::InvalidColumnType(
                0,
                other.to_string(),
                rusqlite::types::Type::Text,
            )),
        }
    }
}

/// A decision as stored, including audit fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub seq: i64,
    pub patch_id: String,
    pub reviewer: String,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrected_points: Option<Vec<LocalPoint>>,
    pub timestamp: String,
    /// Decision on a patch that was not in the flagged queue.
    pub manual_override: bool,
    /// Sequence number of a later decision on the same patch.
    pub superseded_by: Option<i64>,
    pub recorded_at: String,
}

#[derive(Debug, Clone)]
pub struct NewDecision {
    pub patch_id: String,
    pub reviewer: String,
    pub verdict: Verdict,
    pub corrected_points: Option<Vec<LocalPoint>>,
    pub timestamp: String,
    pub manual_override: bool,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS decisions (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    patch_id TEXT NOT NULL,
    reviewer TEXT NOT NULL,
    verdict TEXT NOT NULL CHECK (verdict IN ('accept', 'reject', 'corrected')),
    corrected_points TEXT,
    timestamp TEXT NOT NULL,
    manual_override INTEGER NOT NULL,
    superseded_by INTEGER REFERENCES decisions(seq),
    recorded_at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS decisions_patch ON decisions(patch_id, seq);
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    loaded_at TEXT NOT NULL,
    info TEXT NOT NULL
);
";

const COLUMNS: &str =
    "seq, patch_id, reviewer, verdict, corrected_points, timestamp, manual_override, superseded_by, recorded_at";

fn decision(row: &Row<'_>) -> rusqlite::Result<Decision> {
    let points: Option<String> = row.get(4)?;
    let corrected_points = points
        .map(|p| serde_json::from_str(&p))
        .transpose()
        .map_err(|e| rusqlite::Error::FromSqlConversionFailure(4, rusqlite::types::Type::Text, Box::new(e)))?;
    Ok(Decision {
        seq: row.get(0)?,
        patch_id: row.get(1)?,
        reviewer: row.get(2)?,
        verdict: Verdict::parse(&row.get::<_, String>(3)?)?,
        corrected_points,
        timestamp: row.get(5)?,
        manual_override: row.get(6)?,
        superseded_by: row.get(7)?,
        recorded_at: row.get(8)?,
    })
}

/// Writes go through one connection under a lock; each read opens its own
/// read-only connection so readers do not wait on each other.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    writer: Mutex<Connection>,
}

impl Store {
    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store {
            path: path.to_path_buf(),
            writer: Mutex::new(conn),
        })
    }

    fn reader(&self) -> Result<Connection> {
        let conn = Connection::open_with_flags(
            &self.path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        Ok(conn)
    }

    /// Records a decision and marks the patch's previous active decision as
    /// superseded, in one transaction.
    pub fn record(&self, d: &NewDecision) -> Result<Decision> {
        let mut conn = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let tx = conn.transaction()?;
        let points = d.corrected_points.as_ref().map(serde_json::to_string).transpose()?;
        tx.execute(
            "INSERT INTO decisions (patch_id, reviewer, verdict, corrected_points, timestamp, manual_override, recorded_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![
                d.patch_id,
                d.reviewer,
                d.verdict.as_str(),
                points,
                d.timestamp,
                d.manual_override,
                crate::run::now()
            ],
        )?;
        let seq = tx.last_insert_rowid();
        tx.execute(
            "UPDATE decisions SET superseded_by = ?1 WHERE patch_id = ?2 AND seq < ?1 AND superseded_by IS NULL",
            params![seq, d.patch_id],
        )?;
        let stored = tx.query_row(
            &format!("SELECT {COLUMNS} FROM decisions WHERE seq = ?1"),
            [seq],
            decision,
        )?;
        tx.commit()?;
        Ok(stored)
    }

    /// The current decision of every decided patch, oldest first.
    pub fn active(&self) -> Result<Vec<Decision>> {
        let conn = self.reader()?;
        let mut stmt = conn.prepare(&format!(
            "SELECT {COLUMNS} FROM decisions WHERE superseded_by IS NULL ORDER BY seq"
        ))?;
        let rows = stmt.query_map([], decision)?.collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(rows)
    }

    pub fn active_for(&self, patch_id: &str) -> Result<Option<Decision>> {
        let conn = self.reader()?;
        Ok(conn
            .query_row(
                &format!("SELECT {COLUMNS} FROM decisions WHERE patch_id = ?1 AND superseded_by IS NULL"),
                [patch_id],
                decision,
            )
            .optional()?)
    }

    /// Every decision ever recorded for a patch, oldest first.
    pub fn history(&self, patch_id: &str) -> Result<Vec<Decision>> {
        let conn = self.reader()?;
        let mut stmt = conn.prepare(&format!(
            "SELECT {COLUMNS} FROM decisions WHERE patch_id = ?1 ORDER BY seq"
        ))?;
        let rows = stmt
            .query_map([patch_id], decision)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(rows)
    }

    /// The full audit log, oldest first.
    pub fn all(&self) -> Result<Vec<Decision>> {
        let conn = self.reader()?;
        let mut stmt = conn.prepare(&format!("SELECT {COLUMNS} FROM decisions ORDER BY seq"))?;
        let rows = stmt.query_map([], decision)?.collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(rows)
    }

    pub fn register_run(&self, info: &serde_json::Value) -> Result<i64> {
        let conn = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        conn.execute(
            "INSERT INTO runs (loaded_at, info) VALUES (?1, ?2)",
            params![crate::run::now(), info.to_string()],
        )?;
        Ok(conn.last_insert_rowid())
    }

    pub fn runs(&self) -> Result<usize> {
        let conn = self.reader()?;
        Ok(conn.query_row("SELECT COUNT(*) FROM runs", [], |r| r.get::<_, i64>(0))? as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn new(patch: &str, verdict: Verdict) -> NewDecision {
        NewDecision {
            patch_id: patch.into(),
            reviewer: "r1".into(),
            verdict,
            corrected_points: (verdict == Verdict::Corrected).then(|| vec![LocalPoint { x: 1.5, y: 2.0 }]),
            timestamp: "2024-05-01T10:00:00Z".into(),
            manual_override: false,
        }
    }

    #[test]
    fn later_decisions_supersede_and_history_is_kept() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(&dir.path().join("r.sqlite")).unwrap();
        let a = store.record(&new("p1", Verdict::Accept)).unwrap();
        store.record(&new("p2", Verdict::Reject)).unwrap();
        let c = store.record(&new("p1", Verdict::Corrected)).unwrap();
        let active = store.active().unwrap();
        assert_eq!(active.len(), 2);
        assert_eq!(store.active_for("p1").unwrap().unwrap(), c);
        let hist = store.history("p1").unwrap();
        assert_eq!(hist.len(), 2);
        assert_eq!(hist[0].seq, a.seq);
        assert_eq!(hist[0].superseded_by, Some(c.seq));
        assert_eq!(hist[1].corrected_points, Some(vec![LocalPoint { x: 1.5, y: 2.0 }]));
        assert_eq!(store.all().unwrap().len(), 3);
    }

    #[test]
    fn store_persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.sqlite");
        {
            let store = Store::open(&path).unwrap();
            store.record(&new("p1", Verdict::Reject)).unwrap();
            store.register_run(&serde_json::json!({"flagged": 3})).unwrap();
        }
        let store = Store::open(&path).unwrap();
        assert_eq!(store.active().unwrap()[0].verdict, Verdict::Reject);
        assert_eq!(store.runs().unwrap(), 1);
    }
}
