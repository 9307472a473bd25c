//! Irregular multivariate time series data model.
//!
//! An irregular sample is a set of per-channel observations at asynchronous
//! timestamps. In memory the missing marker is value 0 with mask 0, which
//! keeps masked arithmetic branch-free; on disk (JSON-Lines) missing cells
//! are `null`. Fixed-shape neural components consume [`GriddedWindow`]s
//! produced by [`to_grid`], which buckets observations onto a canonical
//! slot grid (slot collisions aggregate by arithmetic mean).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// One irregular sample: timestamps, L x C values with missing cells, the
/// observation mask, and the split time separating lookback from forecast.
#[derive(Clone, Debug, PartialEq)]
pub struct ImtsSample {
    pub timestamps: Vec<f64>,
    /// L x C, zero at unobserved cells.
    pub values: Mat,
    /// L x C, 1.0 where observed.
    pub mask: Mat,
    pub split_time: f64,
}

impl ImtsSample {
    /// Validates all structural invariants.
    pub fn new(timestamps: Vec<f64>, values: Mat, mask: Mat, split_time: f64) -> Result<Self> {
        let s = Self::new_unchecked(timestamps, values, mask, split_time);
        s.validate(true)?;
        Ok(s)
    }

    pub(crate) fn new_unchecked(
        timestamps: Vec<f64>,
        values: Mat,
        mask: Mat,
        split_time: f64,
    ) -> Self {
        ImtsSample { timestamps, values, mask, split_time }
    }

    fn validate(&self, check_split: bool) -> Result<()> {
        let l = self.timestamps.len();
        if l == 0 {
            return Err(Error::Invariant("sample has no timestamps".into()));
        }
        if self.values.rows() != l || self.mask.rows() != l {
            return Err(Error::Invariant(format!(
                "row count mismatch: {} timestamps, {} value rows, {} mask rows",
                l,
                self.values.rows(),
                self.mask.rows()
            )));
        }
        if self.values.cols() != self.mask.cols() || self.values.cols() == 0 {
            return Err(Error::Invariant(format!(
                "column mismatch: values {}x{}, mask {}x{}",
                self.values.rows(),
                self.values.cols(),
                self.mask.rows(),
                self.mask.cols()
            )));
        }
        for w in self.timestamps.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Invariant("timestamps not increasing".into()));
            }
        }
        if self.timestamps.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invariant("non-finite timestamp".into()));
        }
        for r in 0..l {
            let mut any = false;
            for c in 0..self.mask.cols() {
                let m = self.mask.get(r, c);
                if m != 0.0 && m != 1.0 {
                    return Err(Error::Invariant(format!("mask[{r}][{c}] not 0/1")));
                }
                if m == 0.0 && self.values.get(r, c) != 0.0 {
                    return Err(Error::Invariant(format!(
                        "values[{r}][{c}] nonzero under mask 0"
                    )));
                }
                any |= m == 1.0;
            }
            if !any {
                return Err(Error::Invariant(format!("row {r} has no observed cell")));
            }
        }
        if check_split {
            let (t0, tl) = (self.timestamps[0], *self.timestamps.last().unwrap());
            if !(self.split_time >= t0 && self.split_time <= tl) {
                return Err(Error::Invariant(format!(
                    "split_time {} outside [{}, {}]",
                    self.split_time, t0, tl
                )));
            }
        }
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        self.values.cols()
    }

    pub fn n_rows(&self) -> usize {
        self.timestamps.len()
    }
}

/// A sample split at its split time: the lookback history plus the forecast
/// query (times and mask) and, once revealed, the ground-truth targets.
#[derive(Clone, Debug)]
pub struct WindowPair {
    pub lookback: ImtsSample,
    pub query_times: Vec<f64>,
    /// One row per query time; marks exactly the cells that will be evaluated.
    pub query_mask: Mat,
    /// Ground-truth values on the query rows; `None` until revealed.
    pub targets: Option<Mat>,
}

impl WindowPair {
    /// Split a sample into lookback (t <= split) and forecast (t > split) parts.
    pub fn from_sample(sample: &ImtsSample) -> Result<Self> {
        let split = sample.split_time;
        let c = sample.n_vars();
        let n_look = sample.timestamps.iter().take_while(|&&t| t <= split).count();
        if n_look == 0 {
            return Err(Error::Invariant("no lookback rows at or before split".into()));
        }
        let mut lv = Mat::zeros(n_look, c);
        let mut lm = Mat::zeros(n_look, c);
        for r in 0..n_look {
            lv.row_mut(r).copy_from_slice(sample.values.row(r));
            lm.row_mut(r).copy_from_slice(sample.mask.row(r));
        }
        let lookback = ImtsSample::new_unchecked(
            sample.timestamps[..n_look].to_vec(),
            lv,
            lm,
            split,
        );
        let n_fore = sample.n_rows() - n_look;
        let mut qv = Mat::zeros(n_fore, c);
        let mut qm = Mat::zeros(n_fore, c);
        for r in 0..n_fore {
            qv.row_mut(r).copy_from_slice(sample.values.row(n_look + r));
            qm.row_mut(r).copy_from_slice(sample.mask.row(n_look + r));
        }
        Ok(WindowPair {
            lookback,
            query_times: sample.timestamps[n_look..].to_vec(),
            query_mask: qm,
            targets: Some(qv),
        })
    }

    /// Copy with the targets withheld.
    pub fn redacted(&self) -> WindowPair {
        WindowPair {
            lookback: self.lookback.clone(),
            query_times: self.query_times.clone(),
            query_mask: self.query_mask.clone(),
            targets: None,
        }
    }
}

/// Canonical slot grid: `l_in` uniform lookback slots over
/// `[window_start, split]` and `l_out` forecast slots over `(split, window_end]`.
/// Fixed per run; never inferred per sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub l_in: usize,
    pub l_out: usize,
    pub window_start: f64,
    pub window_end: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l_in == 0 || self.l_out == 0 {
            return Err(Error::Config("grid lengths must be positive".into()));
        }
        if !(self.window_end > self.window_start) {
            return Err(Error::Config(format!(
                "window_end {} must exceed window_start {}",
                self.window_end, self.window_start
            )));
        }
        Ok(())
    }
}

/// Fixed-shape L x C window on the canonical grid. Missing cells are
/// zero-filled with mask 0.
#[derive(Clone, Debug, PartialEq)]
pub struct GriddedWindow {
    pub values: Mat,
    pub mask: Mat,
    /// Representative time per slot (slot centers).
    pub slot_times: Vec<f64>,
}

impl GriddedWindow {
    pub fn grid_len(&self) -> usize {
        self.values.rows()
    }

    pub fn n_vars(&self) -> usize {
        self.values.cols()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&m| m == 1.0).count()
    }
}

/// A homogeneous batch of gridded windows. `targets` stays `None` during the
/// inference stage and is attached only when ground truth is revealed.
#[derive(Clone, Debug)]
pub struct MaskedBatch {
    pub inputs: Vec<GriddedWindow>,
    pub queries: Vec<GriddedWindow>,
    pub targets: Option<Vec<GriddedWindow>>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Bucket one sample onto the canonical grid.
///
/// Returns (lookback, query, target) windows. Each observation lands in the
/// slot containing its timestamp; collisions aggregate by arithmetic mean.
/// The query window carries the target mask with zeroed values.
pub fn to_grid(
    sample: &ImtsSample,
    grid: &GridSpec,
) -> Result<(GriddedWindow, GriddedWindow, GriddedWindow)> {
    grid.validate()?;
    let split = sample.split_time;
    if !(split > grid.window_start && split < grid.window_end) {
        return Err(Error::Config(format!(
            "split_time {} outside window ({}, {})",
            split, grid.window_start, grid.window_end
        )));
    }
    let c = sample.n_vars();
    let w_in = (split - grid.window_start) / grid.l_in as f64;
    let w_out = (grid.window_end - split) / grid.l_out as f64;

    let pair = WindowPair::from_sample(sample)?;
    let mut look_sum = Mat::zeros(grid.l_in, c);
    let mut look_cnt = Mat::zeros(grid.l_in, c);
    for (r, &t) in pair.lookback.timestamps.iter().enumerate() {
        if t < grid.window_start {
            return Err(Error::Config(format!(
                "observation at t={} precedes window start {}",
                t, grid.window_start
            )));
        }
        // Slots [start + i*w, start + (i+1)*w), last slot closed at split.
        let idx = (((t - grid.window_start) / w_in) as usize).min(grid.l_in - 1);
        for v in 0..c {
            if pair.lookback.mask.get(r, v) == 1.0 {
                look_sum.add_at(idx, v, pair.lookback.values.get(r, v));
                look_cnt.add_at(idx, v, 1.0);
            }
        }
    }
    let mut fore_sum = Mat::zeros(grid.l_out, c);
    let mut fore_cnt = Mat::zeros(grid.l_out, c);
    let targets = pair.targets.as_ref().expect("from_sample always sets targets");
    for (r, &t) in pair.query_times.iter().enumerate() {
        if t > grid.window_end {
            return Err(Error::Config(format!(
                "observation at t={} exceeds window end {}",
                t, grid.window_end
            )));
        }
        // Slots (split + i*w, split + (i+1)*w], so ceil-minus-one indexing.
        let frac = (t - split) / w_out;
        let idx = (frac.ceil() as usize).saturating_sub(1).min(grid.l_out - 1);
        for v in 0..c {
            if pair.query_mask.get(r, v) == 1.0 {
                fore_sum.add_at(idx, v, targets.get(r, v));
                fore_cnt.add_at(idx, v, 1.0);
            }
        }
    }

    let finish = |sum: Mat, cnt: Mat| -> (Mat, Mat) {
        let mut vals = Mat::zeros(sum.rows(), sum.cols());
        let mut mask = Mat::zeros(sum.rows(), sum.cols());
        for r in 0..sum.rows() {
            for v in 0..sum.cols() {
                let n = cnt.get(r, v);
                if n > 0.0 {
                    vals.set(r, v, sum.get(r, v) / n);
                    mask.set(r, v, 1.0);
                }
            }
        }
        (vals, mask)
    };
    let (lv, lm) = finish(look_sum, look_cnt);
    let (tv, tm) = finish(fore_sum, fore_cnt);

    let look_times: Vec<f64> =
        (0..grid.l_in).map(|i| grid.window_start + (i as f64 + 0.5) * w_in).collect();
    let fore_times: Vec<f64> =
        (0..grid.l_out).map(|i| split + (i as f64 + 0.5) * w_out).collect();

    let lookback = GriddedWindow { values: lv, mask: lm, slot_times: look_times };
    let query = GriddedWindow {
        values: Mat::zeros(grid.l_out, c),
        mask: tm.clone(),
        slot_times: fore_times.clone(),
    };
    let target = GriddedWindow { values: tv, mask: tm, slot_times: fore_times };
    Ok((lookback, query, target))
}

/// One sample on the canonical grid: lookback input, forecast query (target
/// mask with zeroed values), and the ground-truth target window.
#[derive(Clone, Debug)]
pub struct GriddedExample {
    pub lookback: GriddedWindow,
    pub query: GriddedWindow,
    pub target: GriddedWindow,
}

/// Grid a whole dataset, preserving order.
pub fn grid_dataset(samples: &[ImtsSample], grid: &GridSpec) -> Result<Vec<GriddedExample>> {
    samples
        .iter()
        .map(|s| {
            let (lookback, query, target) = to_grid(s, grid)?;
            Ok(GriddedExample { lookback, query, target })
        })
        .collect()
}

/// Mean squared error over observed cells: sum(mask * (pred-target)^2) / sum(mask).
pub fn masked_mse(pred: &Mat, target: &GriddedWindow) -> Result<f64> {
    masked_moment(pred, target, |d| d * d)
}

/// Mean absolute error over observed cells.
pub fn masked_mae(pred: &Mat, target: &GriddedWindow) -> Result<f64> {
    masked_moment(pred, target, f64::abs)
}

fn masked_moment(pred: &Mat, target: &GriddedWindow, f: impl Fn(f64) -> f64) -> Result<f64> {
    if !pred.same_shape(&target.values) {
        return Err(Error::Shape(format!(
            "pred {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.values.rows(),
            target.values.cols()
        )));
    }
    let mut acc = 0.0;
    let mut n = 0.0;
    for ((p, t), m) in pred
        .as_slice()
        .iter()
        .zip(target.values.as_slice())
        .zip(target.mask.as_slice())
    {
        if *m == 1.0 {
            acc += f(p - t);
            n += 1.0;
        }
    }
    if n == 0.0 {
        return Err(Error::EmptyTarget);
    }
    Ok(acc / n)
}

/// Unnormalized masked squared norm ||(pred - target) * mask||^2 (a sum, not
/// a mean). An all-zero mask yields 0 here: this quantity feeds uncertainty
/// normalization, not a metric.
pub fn masked_sq_norm(pred: &Mat, target: &GriddedWindow) -> Result<f64> {
    if !pred.same_shape(&target.values) {
        return Err(Error::Shape(format!(
            "pred {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.values.rows(),
            target.values.cols()
        )));
    }
    let mut acc = 0.0;
    for ((p, t), m) in pred
        .as_slice()
        .iter()
        .zip(target.values.as_slice())
        .zip(target.mask.as_slice())
    {
        if *m == 1.0 {
            let d = p - t;
            acc += d * d;
        }
    }
    Ok(acc)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    t: Vec<f64>,
    v: Vec<Vec<Option<f64>>>,
    split: f64,
}

/// Parse one JSONL record into a sample. `line_no` is 1-based and only used
/// for error reporting.
pub fn parse_jsonl_line(line: &str, line_no: usize) -> Result<ImtsSample> {
    let rec: JsonRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    let l = rec.t.len();
    if rec.v.len() != l {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("{} timestamps but {} value rows", l, rec.v.len()),
        });
    }
    let c = rec.v.first().map_or(0, |r| r.len());
    let mut values = Mat::zeros(l, c);
    let mut mask = Mat::zeros(l, c);
    for (r, row) in rec.v.iter().enumerate() {
        if row.len() != c {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("value row {} has width {}, expected {}", r, row.len(), c),
            });
        }
        for (j, cell) in row.iter().enumerate() {
            if let Some(x) = cell {
                if !x.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("non-finite value at row {r} col {j}"),
                    });
                }
                values.set(r, j, *x);
                mask.set(r, j, 1.0);
            }
        }
    }
    ImtsSample::new(rec.t, values, mask, rec.split).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })
}

/// Streaming JSONL reader; yields samples in file order.
pub struct JsonlReader<R> {
    reader: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(reader: R) -> Self {
        JsonlReader { reader, line_no: 0, buf: String::new() }
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<ImtsSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            self.line_no += 1;
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    let line = self.buf.trim();
                    if line.is_empty() {
                        continue;
                    }
                    return Some(parse_jsonl_line(line, self.line_no));
                }
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}

/// Open a JSONL dataset file as a sample stream.
pub fn load_jsonl(path: &Path) -> Result<JsonlReader<BufReader<File>>> {
    Ok(JsonlReader::new(BufReader::new(File::open(path)?)))
}

/// Load a whole file eagerly, preserving order.
pub fn load_jsonl_all(path: &Path) -> Result<Vec<ImtsSample>> {
    load_jsonl(path)?.collect()
}

/// Serialize one sample as a JSONL record (no trailing newline).
pub fn sample_to_json(sample: &ImtsSample) -> String {
    let v: Vec<Vec<Option<f64>>> = (0..sample.n_rows())
        .map(|r| {
            (0..sample.n_vars())
                .map(|c| {
                    if sample.mask.get(r, c) == 1.0 {
                        Some(sample.values.get(r, c))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    let rec = JsonRecord { t: sample.timestamps.clone(), v, split: sample.split_time };
    serde_json::to_string(&rec).expect("record serialization cannot fail")
}

/// Write samples as JSONL.
pub fn write_jsonl<'a>(
    path: &Path,
    samples: impl IntoIterator<Item = &'a ImtsSample>,
) -> Result<()> {
    let mut f = File::create(path)?;
    for s in samples {
        writeln!(f, "{}", sample_to_json(s))?;
    }
    Ok(())
}
