//! Durable submission history. It is the only source for cooldown decisions
//! and dashboard statistics.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use chrono::NaiveDate;
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store error: {0}")]
    Sql(#[from] rusqlite::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Evaluated,
    SkippedCooldown,
    SkippedTamper,
    Failed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Evaluated => "Evaluated",
            Status::SkippedCooldown => "SkippedCooldown",
            Status::SkippedTamper => "SkippedTamper",
            Status::Failed => "Failed",
        }
    }

    pub fn parse(s: &str) -> Option<Status> {
        match s {
            "Evaluated" => Some(Status::Evaluated),
            "SkippedCooldown" => Some(Status::SkippedCooldown),
            "SkippedTamper" => Some(Status::SkippedTamper),
            "Failed" => Some(Status::Failed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub assessment_id: String,
    pub group_id: String,
    pub commit: String,
    pub pushed_at: i64,
    pub received_at: i64,
    pub status: Status,
    pub evaluated_at: Option<i64>,
    pub tests_passed: u32,
    pub tests_failed: u32,
}

impl SubmissionRecord {
    pub fn validate(&self) -> Result<(), StoreError> {
        let evaluated = self.status == Status::Evaluated;
        if evaluated != self.evaluated_at.is_some() {
            return Err(StoreError::InvalidRecord(
                "evaluated_at must be present exactly for Evaluated records".into(),
            ));
        }
        if !evaluated && (self.tests_passed != 0 || self.tests_failed != 0) {
            return Err(StoreError::InvalidRecord(
                "only Evaluated records carry test counts".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CooldownDecision {
    Evaluate,
    SkippedUntil(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stats {
    pub passed: u32,
    pub failed: u32,
    pub submissions: u32,
    pub days: u32,
}

pub const CSV_HEADER: [&str; 9] = [
    "assessment_id",
    "group_id",
    "commit",
    "pushed_at",
    "received_at",
    "status",
    "evaluated_at",
    "tests_passed",
    "tests_failed",
];

/// Whole days elapsed since midnight UTC of `start_date`, clamped at zero.
pub fn days_since(start_date: NaiveDate, now: i64) -> u32 {
    let start = start_date.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp();
    if now <= start {
        0
    } else {
        ((now - start) / 86_400) as u32
    }
}

pub struct Store {
    conn: Mutex<Connection>,
}

impl Store {
    pub fn open(path: &Path) -> Result<Store, StoreError> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.busy_timeout(std::time::Duration::from_secs(10))?;
        conn.execute_batch(
            "CREATE TABLE IF NOT EXISTS submissions (
                seq           INTEGER PRIMARY KEY AUTOINCREMENT,
                assessment_id TEXT    NOT NULL,
                group_id      TEXT    NOT NULL,
                commit_id     TEXT    NOT NULL,
                pushed_at     INTEGER NOT NULL,
                received_at   INTEGER NOT NULL,
                status        TEXT    NOT NULL,
                evaluated_at  INTEGER,
                tests_passed  INTEGER NOT NULL,
                tests_failed  INTEGER NOT NULL
            );
            CREATE INDEX IF NOT EXISTS submissions_key ON submissions (assessment_id, group_id);",
        )?;
        Ok(Store { conn: Mutex::new(conn) })
    }

    pub fn open_in_memory() -> Result<Store, StoreError> {
        Store::open(Path::new(":memory:"))
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn record(&self, r: &SubmissionRecord) -> Result<(), StoreError> {
        r.validate()?;
        self.conn().execute(
            "INSERT INTO submissions
             (assessment_id, group_id, commit_id, pushed_at, received_at, status, evaluated_at, tests_passed, tests_failed)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            params![
                r.assessment_id,
                r.group_id,
                r.commit,
                r.pushed_at,
                r.received_at,
                r.status.as_str(),
                r.evaluated_at,
                r.tests_passed,
                r.tests_failed
            ],
        )?;
        Ok(())
    }

    fn last_evaluated_at(&self, assessment_id: &str, group_id: &str) -> Result<Option<i64>, StoreError> {
        let v: Option<i64> = self.conn().query_row(
            "SELECT MAX(evaluated_at) FROM submissions
             WHERE assessment_id = ?1 AND group_id = ?2 AND status = 'Evaluated'",
            params![assessment_id, group_id],
            |row| row.get(0),
        )?;
        Ok(v)
    }

    /// Evaluate when no evaluation happened yet or the last one is at least
    /// `cooldown_s` old; the boundary itself is allowed.
    pub fn check_cooldown(
        &self,
        group_id: &str,
        assessment_id: &str,
        now: i64,
        cooldown_s: u64,
    ) -> Result<CooldownDecision, StoreError> {
        Ok(match self.last_evaluated_at(assessment_id, group_id)? {
            None => CooldownDecision::Evaluate,
            Some(last) if now - last >= cooldown_s as i64 => CooldownDecision::Evaluate,
            Some(last) => CooldownDecision::SkippedUntil(last + cooldown_s as i64),
        })
    }

    pub fn stats(
        &self,
        group_id: &str,
        assessment_id: &str,
        now: i64,
        start_date: NaiveDate,
    ) -> Result<Stats, StoreError> {
        let conn = self.conn();
        let latest: Option<(u32, u32)> = conn
            .query_row(
                "SELECT tests_passed, tests_failed FROM submissions
                 WHERE assessment_id = ?1 AND group_id = ?2 AND status = 'Evaluated'
                 ORDER BY seq DESC LIMIT 1",
                params![assessment_id, group_id],
                |row| Ok((row.get(0)?, row.get(1)?)),
            )
            .optional()?;
        let submissions: u32 = conn.query_row(
            "SELECT COUNT(*) FROM submissions WHERE assessment_id = ?1 AND group_id = ?2",
            params![assessment_id, group_id],
            |row| row.get(0),
        )?;
        let (passed, failed) = latest.unwrap_or((0, 0));
        Ok(Stats {
            passed,
            failed,
            submissions,
            days: days_since(start_date, now),
        })
    }

    /// Every record in insertion order.
    pub fn records(&self) -> Result<Vec<SubmissionRecord>, StoreError> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT assessment_id, group_id, commit_id, pushed_at, received_at, status, evaluated_at, tests_passed, tests_failed
             FROM submissions ORDER BY seq",
        )?;
        let rows = stmt.query_map([], |row| {
            let status: String = row.get(5)?;
            Ok(SubmissionRecord {
                assessment_id: row.get(0)?,
                group_id: row.get(1)?,
                commit: row.get(2)?,
                pushed_at: row.get(3)?,
                received_at: row.get(4)?,
                status: Status::parse(&status).unwrap_or(Status::Failed),
                evaluated_at: row.get(6)?,
                tests_passed: row.get(7)?,
                tests_failed: row.get(8)?,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Header-bearing CSV of all records.
    pub fn dump_csv(&self, out: impl Write) -> Result<(), StoreError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in self.records()? {
            w.write_record([
                r.assessment_id,
                r.group_id,
                r.commit,
                r.pushed_at.to_string(),
                r.received_at.to_string(),
                r.status.as_str().to_string(),
                r.evaluated_at.map(|t| t.to_string()).unwrap_or_default(),
                r.tests_passed.to_string(),
                r.tests_failed.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Reads records back from [`Store::dump_csv`] output.
pub fn parse_csv(input: impl std::io::Read) -> Result<Vec<SubmissionRecord>, StoreError> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("").to_string();
        let int = |i: usize| -> Result<i64, StoreError> {
            field(i)
                .parse()
                .map_err(|_| StoreError::InvalidRecord(format!("column {} is not an integer", CSV_HEADER[i])))
        };
        let evaluated_at = match field(6).as_str() {
            "" => None,
            _ => Some(int(6)?),
        };
        out.push(SubmissionRecord {
            assessment_id: field(0),
            group_id: field(1),
            commit: field(2),
            pushed_at: int(3)?,
            received_at: int(4)?,
            status: Status::parse(&field(5)).ok_or_else(|| StoreError::InvalidRecord(field(5)))?,
            evaluated_at,
            tests_passed: int(7)? as u32,
            tests_failed: int(8)? as u32,
        });
    }
    Ok(out)
}
