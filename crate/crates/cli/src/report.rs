//! Markdown tables from results files: one row per condition, one column
//! per variant.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use dualfuse_core::data::Split;
use dualfuse_core::eval::{EvalRow, SnrLabel};

use crate::error::{CliError, CliResult};
use crate::results::{self, ResultsFile};

/// Variant compared against in the improvement column, and the variant
/// being compared.
pub const BASELINE: &str = "middle";
pub const CANDIDATE: &str = "dual_use";

/// `(b - a) / b`, the relative WER reduction of `a` over baseline `b`.
pub fn relative_improvement(a: f64, b: f64) -> Option<f64> {
    (b > 0.0).then(|| (b - a) / b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub markdown: String,
    pub plot_csv: Vec<u8>,
    pub digests: Vec<String>,
}

/// Combines results files, refusing mixed digests unless allowed.
pub fn combine(files: &[ResultsFile], allow_mixed: bool) -> CliResult<(Vec<EvalRow>, Vec<String>)> {
    let digests: BTreeSet<String> = files
        .iter()
        .map(|f| f.digest.clone().unwrap_or_else(|| "<none>".into()))
        .collect();
    if digests.len() > 1 && !allow_mixed {
        return Err(CliError::Usage(format!(
            "results come from different configs ({}); pass --allow-mixed to combine them",
            digests.iter().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut rows = Vec::new();
    for f in files {
        rows = results::merge(rows, f.rows.clone());
    }
    Ok((rows, digests.into_iter().collect()))
}

fn condition_rank(s: &SnrLabel) -> (u8, f64) {
    match s {
        SnrLabel::Db(x) => (0, *x),
        SnrLabel::Clean => (1, 0.0),
        SnrLabel::Average => (2, 0.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Condition {
    split: Split,
    pool: String,
    snr: SnrLabel,
}

fn conditions(rows: &[EvalRow]) -> Vec<Condition> {
    let mut out: Vec<Condition> = Vec::new();
    for r in rows {
        let c = Condition {
            split: r.split,
            pool: r.noise_pool.clone(),
            snr: r.snr_db,
        };
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.sort_by(|a, b| {
        (a.split.as_str(), &a.pool).cmp(&(b.split.as_str(), &b.pool)).then(
            condition_rank(&a.snr)
                .partial_cmp(&condition_rank(&b.snr))
                .expect("finite snr"),
        )
    });
    out
}

fn variants(rows: &[EvalRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.variant) {
            out.push(r.variant.clone());
        }
    }
    out
}

fn lookup<'a>(rows: &'a [EvalRow], variant: &str, c: &Condition) -> Option<&'a EvalRow> {
    rows.iter()
        .find(|r| r.variant == variant && r.split == c.split && r.noise_pool == c.pool && r.snr_db == c.snr)
}

pub fn build(rows: &[EvalRow], digests: &[String]) -> CliResult<Report> {
    let vars = variants(rows);
    let conds = conditions(rows);
    let improvement = vars.iter().any(|v| v == BASELINE) && vars.iter().any(|v| v == CANDIDATE);

    let mut md = String::new();
    writeln!(md, "Config digest: {}", digests.join(", ")).ok();
    writeln!(md).ok();
    let mut header = vec!["split".to_string(), "noise".to_string(), "SNR (dB)".to_string()];
    header.extend(vars.iter().cloned());
    if improvement {
        header.push("rel. impr.".into());
    }
    writeln!(md, "| {} |", header.join(" | ")).ok();
    writeln!(md, "|{}", "---|".repeat(header.len())).ok();

    let mode_params = |v: &str| {
        rows.iter()
            .find(|r| r.variant == v)
            .map(|r| format!("{} / {}", r.mode, r.params))
            .unwrap_or_default()
    };
    let mut cells = vec![String::new(), String::new(), "mode / params".to_string()];
    cells.extend(vars.iter().map(|v| mode_params(v)));
    if improvement {
        cells.push(String::new());
    }
    writeln!(md, "| {} |", cells.join(" | ")).ok();

    for c in &conds {
        let mut cells = vec![c.split.as_str().to_string(), c.pool.clone(), c.snr.to_string()];
        for v in &vars {
            cells.push(
                lookup(rows, v, c)
                    .map(|r| format!("{:.2}", r.wer))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        if improvement {
            let a = lookup(rows, CANDIDATE, c).map(|r| r.wer);
            let b = lookup(rows, BASELINE, c).map(|r| r.wer);
            let cell = match (a, b) {
                (Some(a), Some(b)) => relative_improvement(a, b)
                    .map(|x| format!("{:.1}%", 100.0 * x))
                    .unwrap_or_else(|| "n/a".into()),
                _ => "-".into(),
            };
            cells.push(cell);
        }
        writeln!(md, "| {} |", cells.join(" | ")).ok();
    }

    let mut plot = format!("# config_digest={}\n", digests.join(";")).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut plot);
        let err = |e: csv::Error| CliError::Usage(e.to_string());
        w.write_record(["split", "noise_pool", "snr_db", "variant", "mode", "params", "wer"])
            .map_err(err)?;
        for c in &conds {
            for v in &vars {
                if let Some(r) = lookup(rows, v, c) {
                    w.write_record([
                        c.split.as_str().to_string(),
                        c.pool.clone(),
                        c.snr.to_string(),
                        v.clone(),
                        r.mode.clone(),
                        r.params.to_string(),
                        r.wer.to_string(),
                    ])
                    .map_err(err)?;
                }
            }
        }
        w.flush().map_err(|e| CliError::io("<plot data>", e))?;
    }
    Ok(Report {
        markdown: md,
        plot_csv: plot,
        digests: digests.to_vec(),
    })
}

pub fn report_files(paths: &[&Path], allow_mixed: bool) -> CliResult<Report> {
    if paths.is_empty() {
        return Err(CliError::Usage("report needs at least one results file".into()));
    }
    let files = paths.iter().map(|p| results::read(p)).collect::<CliResult<Vec<_>>>()?;
    let (rows, digests) = combine(&files, allow_mixed)?;
    build(&rows, &digests)
}
