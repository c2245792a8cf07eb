//! Report emitters: every tabular artifact is written as CSV (RFC-4180
//! quoting via the `csv` crate) plus a JSON mirror, with fixed column sets
//! and fixed-precision floats so byte-identical runs produce byte-identical
//! reports.

use std::path::Path;

use serde::Serialize;

use crate::ablate::{AblationResult, SweepResult};
use crate::error::{Error, Result};
use crate::model::HeadId;
use crate::screen::{HeadClassification, SelectivityRecord};
use crate::spectral::{PrTrajectory, TrajectoryFeatures};

pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("csv: {e}")))?;
    w.write_record(header)
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    for row in rows {
        w.write_record(row)
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// `(step, tokens, head, pr)` rows, heads in flat order per checkpoint.
pub fn trajectories_csv(path: &Path, trajectories: &[PrTrajectory]) -> Result<()> {
    let mut rows = Vec::new();
    if let Some(first) = trajectories.first() {
        for i in 0..first.points.len() {
            for t in trajectories {
                let p = &t.points[i];
                rows.push(vec![
                    p.step.to_string(),
                    p.tokens_seen.to_string(),
                    t.head.to_string(),
                    fmt_f(p.pr),
                ]);
            }
        }
    }
    write_csv(path, &["step", "tokens", "head", "pr"], &rows)
}

pub fn features_csv(
    path: &Path,
    features: &[(HeadId, TrajectoryFeatures)],
) -> Result<()> {
    let rows: Vec<Vec<String>> = features
        .iter()
        .map(|(h, f)| {
            vec![
                h.to_string(),
                fmt_f(f.integral),
                fmt_f(f.spread),
                fmt_f(f.max_pr),
                fmt_f(f.mean_post_grok),
                fmt_f(f.max_rate),
            ]
        })
        .collect();
    write_csv(
        path,
        &["head", "integral", "spread", "max_pr", "mean_post_grok", "max_rate"],
        &rows,
    )
}

pub fn ranking_csv(path: &Path, ranking: &[(HeadId, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = ranking
        .iter()
        .enumerate()
        .map(|(i, (h, v))| vec![(i + 1).to_string(), h.to_string(), fmt_f(*v)])
        .collect();
    write_csv(path, &["rank", "head", "value"], &rows)
}

pub fn screen_csv(path: &Path, records: &[SelectivityRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.head.to_string(),
                r.class.name().to_string(),
                fmt_f(r.sel),
                fmt_f(r.attn_mass),
                fmt_f(r.t_mean),
                fmt_f(r.k_mean),
                r.n_valid.to_string(),
                r.n_excluded.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &["head", "class", "sel", "attn_mass", "t_mean", "k_mean", "n_valid", "n_excluded"],
        &rows,
    )
}

pub fn classify_csv(path: &Path, classes: &[HeadClassification]) -> Result<()> {
    let rows: Vec<Vec<String>> = classes
        .iter()
        .map(|c| {
            vec![
                c.head.to_string(),
                c.class.map(|cl| cl.name().to_string()).unwrap_or_else(|| "UNCLASSIFIED".into()),
                c.best_class.name().to_string(),
                fmt_f(c.best_sel),
                c.tie.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["head", "assigned", "best_class", "best_sel", "tie"], &rows)
}

fn heads_field(heads: &[HeadId]) -> String {
    heads
        .iter()
        .map(|h| h.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn ablation_csv(path: &Path, rows_in: &[AblationResult]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows_in
        .iter()
        .map(|r| {
            vec![
                r.condition.clone(),
                heads_field(&r.heads),
                r.heads.len().to_string(),
                fmt_f(r.top1),
                fmt_f(r.top5),
                fmt_f(r.mean_target_logit),
                fmt_opt(r.val_loss),
                fmt_opt(r.top1_delta),
                fmt_opt(r.top5_delta),
                fmt_opt(r.target_logit_delta),
                fmt_opt(r.val_loss_delta),
                r.flags.join(" "),
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "condition",
            "heads",
            "n_heads",
            "top1",
            "top5",
            "mean_target_logit",
            "val_loss",
            "top1_delta",
            "top5_delta",
            "target_logit_delta",
            "val_loss_delta",
            "flags",
        ],
        &rows,
    )
}

pub fn sweep_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    let rows: Vec<Vec<String>> = sweep
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt_f(r.threshold),
                r.circuit_size.to_string(),
                fmt_f(r.top1),
                fmt_f(r.retention),
                r.flags.join(" "),
            ]
        })
        .collect();
    write_csv(
        path,
        &["threshold", "circuit_size", "top1", "retention", "flags"],
        &rows,
    )
}

pub fn precision_csv(path: &Path, rows_in: &[(usize, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows_in
        .iter()
        .map(|(k, p)| vec![k.to_string(), fmt_f(*p)])
        .collect();
    write_csv(path, &["k", "precision"], &rows)
}

/// `(step, tokens, loss, eval_top1)` behavioral curve rows; the step-0 row
/// has no loss.
pub fn training_summary_csv(path: &Path, rows_in: &[(u64, u64, Option<f64>, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows_in
        .iter()
        .map(|(step, tokens, loss, acc)| {
            vec![
                step.to_string(),
                tokens.to_string(),
                fmt_opt(*loss),
                fmt_f(*acc),
            ]
        })
        .collect();
    write_csv(path, &["step", "tokens", "loss", "eval_top1"], &rows)
}
