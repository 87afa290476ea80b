//! Results CSV: a `# config_digest=` line, then
//! `variant,mode,params,noise_pool,snr_db,split,wer`.

use std::path::Path;

use dualfuse_core::data::Split;
use dualfuse_core::eval::{EvalRow, SnrLabel};
use dualfuse_core::params::write_atomic;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const HEADER: [&str; 7] = ["variant", "mode", "params", "noise_pool", "snr_db", "split", "wer"];
const DIGEST_PREFIX: &str = "# config_digest=";

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    variant: String,
    mode: String,
    params: usize,
    noise_pool: String,
    snr_db: String,
    split: Split,
    wer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsFile {
    pub digest: Option<String>,
    pub rows: Vec<EvalRow>,
}

pub fn to_csv(digest: &str, rows: &[EvalRow]) -> CliResult<Vec<u8>> {
    let mut out = format!("{DIGEST_PREFIX}{digest}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(Record {
                variant: r.variant.clone(),
                mode: r.mode.clone(),
                params: r.params,
                noise_pool: r.noise_pool.clone(),
                snr_db: r.snr_db.to_string(),
                split: r.split,
                wer: r.wer,
            })
            .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if rows.is_empty() {
            w.write_record(HEADER).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io("<results>", e))?;
    }
    Ok(out)
}

pub fn write(path: &Path, digest: &str, rows: &[EvalRow]) -> CliResult<()> {
    write_atomic(path, &to_csv(digest, rows)?)?;
    Ok(())
}

pub fn parse(text: &str) -> CliResult<ResultsFile> {
    let digest = text
        .lines()
        .find_map(|l| l.strip_prefix(DIGEST_PREFIX))
        .map(|d| d.trim().to_string());
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CliError::Usage(format!("results: {e}")))?
        .clone();
    let missing: Vec<&str> = HEADER
        .iter()
        .copied()
        .filter(|h| !headers.iter().any(|x| x == *h))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Usage(format!(
            "results file lacks columns: {}",
            missing.join(", ")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<Record>().enumerate() {
        let r = rec.map_err(|e| CliError::Usage(format!("results row {}: {e}", i + 1)))?;
        rows.push(EvalRow {
            variant: r.variant,
            mode: r.mode,
            params: r.params,
            noise_pool: r.noise_pool,
            snr_db: r.snr_db.parse::<SnrLabel>()?,
            split: r.split,
            wer: r.wer,
        });
    }
    Ok(ResultsFile { digest, rows })
}

pub fn read(path: &Path) -> CliResult<ResultsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text)
}

fn same_cell(a: &EvalRow, b: &EvalRow) -> bool {
    a.variant == b.variant && a.noise_pool == b.noise_pool && a.snr_db == b.snr_db && a.split == b.split
}

/// Replaces rows of `existing` that describe the same cell as a new row,
/// keeping the original order, and appends the rest.
pub fn merge(existing: Vec<EvalRow>, new: Vec<EvalRow>) -> Vec<EvalRow> {
    let mut out = existing;
    for row in new {
        match out.iter_mut().find(|r| same_cell(r, &row)) {
            Some(slot) => *slot = row,
            None => out.push(row),
        }
    }
    out
}
