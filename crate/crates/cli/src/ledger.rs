//! Append-only run ledger: one JSON line per stage execution (run,
//! skip, or failure). Existing lines are never rewritten, so the file
//! is a complete history of how the output tree came to be.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    /// The stage executed and wrote its outputs.
    Ran,
    /// Cache hit: config and inputs unchanged, outputs present.
    Skipped,
    Failed,
}

/// One ledger line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Seconds since the Unix epoch when the entry was written.
    pub unix_time: u64,
    pub stage: String,
    pub status: StageStatus,
    /// Hash of the config sections this stage depends on.
    pub config_hash: String,
    /// Labelled hashes of the input artifacts the stage read.
    pub input_hashes: Vec<String>,
    /// Output paths relative to the output root.
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
    /// Present on failures: the error chain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Handle on one output tree's ledger file.
pub struct RunLedger {
    path: PathBuf,
}

impl RunLedger {
    pub fn at_root(output_root: &Path) -> RunLedger {
        RunLedger {
            path: output_root.join(LEDGER_FILE),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one line; creates the file on first use.
    pub fn append(&self, entry: &LedgerEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .with_context(|| format!("opening ledger {}", self.path.display()))?;
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    /// All entries in write order; an absent file is an empty history.
    pub fn read_all(&self) -> Result<Vec<LedgerEntry>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&self.path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .with_context(|| format!("corrupt ledger line: {l}"))
            })
            .collect()
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
