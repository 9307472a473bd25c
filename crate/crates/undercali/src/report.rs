//! Run artifacts: per-batch CSV, aggregate JSON, plot-ready long format,
//! and the trigger-threshold sweep replayed from recorded telemetry.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! parsed CSV reproduces the recorded values exactly (NaN included).

use serde::{Deserialize, Serialize};

use crate::arm::replay_trigger_count;
use crate::engine::{BatchOutcome, RunReport};
use crate::error::{Error, Result};

pub const BATCH_CSV_HEADER: &str = "batch_index,n_samples,mse,mae,mean_uncertainty,triggered,\
n_reliable,n_unreliable,n_obs,u_var,mu_alloc,sigma_alloc,tau_alloc,mu_trig,sigma_trig,tau_trig";

/// One parsed CSV row; the scalar view of a [`BatchOutcome`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRow {
    pub batch_index: usize,
    pub n_samples: usize,
    pub mse: f64,
    pub mae: f64,
    pub mean_uncertainty: f64,
    pub triggered: bool,
    pub n_reliable: usize,
    pub n_unreliable: usize,
    pub n_obs: usize,
    pub u_var: f64,
    pub mu_alloc: f64,
    pub sigma_alloc: f64,
    pub tau_alloc: f64,
    pub mu_trig: f64,
    pub sigma_trig: f64,
    pub tau_trig: f64,
}

impl From<&BatchOutcome> for BatchRow {
    fn from(o: &BatchOutcome) -> Self {
        BatchRow {
            batch_index: o.batch_index,
            n_samples: o.n_samples,
            mse: o.mse,
            mae: o.mae,
            mean_uncertainty: o.mean_uncertainty,
            triggered: o.triggered,
            n_reliable: o.reliable_idx.len(),
            n_unreliable: o.unreliable_idx.len(),
            n_obs: o.n_obs,
            u_var: o.u_var,
            mu_alloc: o.mu_alloc,
            sigma_alloc: o.sigma_alloc,
            tau_alloc: o.tau_alloc,
            mu_trig: o.mu_trig,
            sigma_trig: o.sigma_trig,
            tau_trig: o.tau_trig,
        }
    }
}

pub fn batch_csv(outcomes: &[BatchOutcome]) -> String {
    let mut out = String::from(BATCH_CSV_HEADER);
    out.push('\n');
    for o in outcomes {
        let r = BatchRow::from(o);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.batch_index,
            r.n_samples,
            r.mse,
            r.mae,
            r.mean_uncertainty,
            r.triggered as u8,
            r.n_reliable,
            r.n_unreliable,
            r.n_obs,
            r.u_var,
            r.mu_alloc,
            r.sigma_alloc,
            r.tau_alloc,
            r.mu_trig,
            r.sigma_trig,
            r.tau_trig,
        ));
    }
    out
}

fn field<'a>(parts: &'a [&'a str], i: usize, line: usize) -> Result<&'a str> {
    parts.get(i).copied().ok_or_else(|| Error::Parse {
        line,
        msg: format!("expected {} fields, found {}", 16, parts.len()),
    })
}

fn num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse { line, msg: format!("bad {what}: {s:?}") })
}

pub fn parse_batch_csv(text: &str) -> Result<Vec<BatchRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == BATCH_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse { line: 1, msg: format!("unexpected header {h:?}") })
        }
        None => return Err(Error::Parse { line: 1, msg: "empty input".into() }),
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != 16 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 16 fields, found {}", parts.len()),
            });
        }
        let triggered = match field(&parts, 5, line)? {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse { line, msg: format!("bad triggered flag: {other:?}") })
            }
        };
        rows.push(BatchRow {
            batch_index: num(parts[0], line, "batch_index")?,
            n_samples: num(parts[1], line, "n_samples")?,
            mse: num(parts[2], line, "mse")?,
            mae: num(parts[3], line, "mae")?,
            mean_uncertainty: num(parts[4], line, "mean_uncertainty")?,
            triggered,
            n_reliable: num(parts[6], line, "n_reliable")?,
            n_unreliable: num(parts[7], line, "n_unreliable")?,
            n_obs: num(parts[8], line, "n_obs")?,
            u_var: num(parts[9], line, "u_var")?,
            mu_alloc: num(parts[10], line, "mu_alloc")?,
            sigma_alloc: num(parts[11], line, "sigma_alloc")?,
            tau_alloc: num(parts[12], line, "tau_alloc")?,
            mu_trig: num(parts[13], line, "mu_trig")?,
            sigma_trig: num(parts[14], line, "sigma_trig")?,
            tau_trig: num(parts[15], line, "tau_trig")?,
        });
    }
    Ok(rows)
}

/// Stream-level summary. For multi-seed aggregates, `mse`/`mae`/
/// `update_frequency` are means over the per-seed values and the `_std`
/// fields carry their population spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub mse: f64,
    pub mae: f64,
    pub update_frequency: f64,
    pub n_batches: usize,
    pub mse_std: f64,
    pub mae_std: f64,
}

impl Aggregate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("aggregate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })
    }
}

pub fn aggregate_of_run(report: &RunReport) -> Aggregate {
    Aggregate {
        mode: report.mode.as_str().to_string(),
        seeds: vec![report.seed],
        mse: report.mse,
        mae: report.mae,
        update_frequency: report.update_frequency,
        n_batches: report.n_batches,
        mse_std: 0.0,
        mae_std: 0.0,
    }
}

/// Recompute the aggregate from parsed per-batch rows: observation-weighted
/// errors, trigger fraction over all batches.
pub fn aggregate_from_rows(mode: &str, seeds: Vec<u64>, rows: &[BatchRow]) -> Aggregate {
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut n = 0usize;
    let mut triggered = 0usize;
    for r in rows {
        if r.n_obs > 0 {
            sq += r.mse * r.n_obs as f64;
            ab += r.mae * r.n_obs as f64;
            n += r.n_obs;
        }
        if r.triggered {
            triggered += 1;
        }
    }
    Aggregate {
        mode: mode.to_string(),
        seeds,
        mse: if n > 0 { sq / n as f64 } else { f64::NAN },
        mae: if n > 0 { ab / n as f64 } else { f64::NAN },
        update_frequency: if rows.is_empty() { 0.0 } else { triggered as f64 / rows.len() as f64 },
        n_batches: rows.len(),
        mse_std: 0.0,
        mae_std: 0.0,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Combine per-seed aggregates of the same mode into a mean/std summary.
pub fn mean_aggregate(per_seed: &[Aggregate]) -> Result<Aggregate> {
    let first = per_seed
        .first()
        .ok_or_else(|| Error::Invariant("no aggregates to combine".into()))?;
    if per_seed.iter().any(|a| a.mode != first.mode) {
        return Err(Error::Invariant("aggregates mix modes".into()));
    }
    if per_seed.iter().any(|a| a.n_batches != first.n_batches) {
        return Err(Error::Invariant("aggregates cover different stream lengths".into()));
    }
    let (mse, mse_std) = mean_std(&per_seed.iter().map(|a| a.mse).collect::<Vec<_>>());
    let (mae, mae_std) = mean_std(&per_seed.iter().map(|a| a.mae).collect::<Vec<_>>());
    let (uf, _) = mean_std(&per_seed.iter().map(|a| a.update_frequency).collect::<Vec<_>>());
    Ok(Aggregate {
        mode: first.mode.clone(),
        seeds: per_seed.iter().flat_map(|a| a.seeds.iter().copied()).collect(),
        mse,
        mae,
        update_frequency: uf,
        n_batches: first.n_batches,
        mse_std,
        mae_std,
    })
}

/// One row per mode, for side-by-side comparisons.
pub fn ablation_csv(aggregates: &[Aggregate]) -> String {
    let mut out = String::from("mode,mse,mae,update_frequency,mse_std\n");
    for a in aggregates {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            a.mode, a.mse, a.mae, a.update_frequency, a.mse_std
        ));
    }
    out
}

fn column_value(r: &BatchRow, column: &str) -> Option<f64> {
    Some(match column {
        "mse" => r.mse,
        "mae" => r.mae,
        "mean_uncertainty" => r.mean_uncertainty,
        "triggered" => r.triggered as u8 as f64,
        "n_samples" => r.n_samples as f64,
        "n_reliable" => r.n_reliable as f64,
        "n_unreliable" => r.n_unreliable as f64,
        "n_obs" => r.n_obs as f64,
        "u_var" => r.u_var,
        "mu_alloc" => r.mu_alloc,
        "sigma_alloc" => r.sigma_alloc,
        "tau_alloc" => r.tau_alloc,
        "mu_trig" => r.mu_trig,
        "sigma_trig" => r.sigma_trig,
        "tau_trig" => r.tau_trig,
        _ => return None,
    })
}

/// Merge labeled runs into `batch_index,series,value` rows for one metric
/// column. Emits exactly one output row per input row.
pub fn long_format(runs: &[(String, Vec<BatchRow>)], column: &str) -> Result<String> {
    let mut out = String::from("batch_index,series,value\n");
    for (label, rows) in runs {
        if label.contains(',') {
            return Err(Error::Config(format!("series label {label:?} contains a comma")));
        }
        for r in rows {
            let v = column_value(r, column)
                .ok_or_else(|| Error::Config(format!("unknown column {column:?}")))?;
            out.push_str(&format!("{},{},{}\n", r.batch_index, label, v));
        }
    }
    Ok(out)
}

/// Replay the trigger rule over recorded score moments at alternative
/// thresholds. Rows without scores (no-estimator modes) are excluded.
pub fn kappa_sweep(
    rows: &[BatchRow],
    alpha_trig: f64,
    kappas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let moments: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_uncertainty.is_finite())
        .map(|r| (r.mean_uncertainty, r.u_var))
        .collect();
    if moments.is_empty() {
        return Err(Error::Invariant("no recorded uncertainty moments to replay".into()));
    }
    let n = moments.len() as f64;
    kappas
        .iter()
        .map(|&k| Ok((k, replay_trigger_count(&moments, alpha_trig, k)? as f64 / n)))
        .collect()
}

pub const KAPPA_SWEEP_DEFAULT: [f64; 4] = [0.25, 0.75, 2.0, 3.0];

pub fn kappa_sweep_csv(sweep: &[(f64, f64)]) -> String {
    let mut out = String::from("kappa_trig,update_frequency\n");
    for (k, f) in sweep {
        out.push_str(&format!("{k},{f}\n"));
    }
    out
}
