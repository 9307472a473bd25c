//! The frozen source forecaster behind a pluggable interface, plus two
//! built-ins: last-observation-carried-forward and a per-variable affine map
//! on the gridded lookback.
//!
//! Freezing is structural: the online engine only ever holds a forecaster
//! behind `&dyn SourceForecaster`, whose methods take `&self`, so no online
//! code path can change its parameters. [`SourceForecaster::param_checksum`]
//! lets callers prove that across a run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffkit::{
    adam_step, checksum, export_values, import_values, load_checkpoint, save_checkpoint, Param,
    ParamSet,
};
use crate::error::{Error, Result};
use crate::imts_data::{masked_mse, GriddedExample, GriddedWindow};
use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub l_in: usize,
    pub l_out: usize,
    pub n_vars: usize,
}

pub trait SourceForecaster {
    fn dims(&self) -> GridDims;
    fn kind(&self) -> &'static str;

    /// Predicted values on the query grid, finite everywhere (the query mask
    /// is applied downstream).
    fn predict(&self, lookback: &GriddedWindow, query: &GriddedWindow) -> Result<Mat>;

    /// Gradient of `sum(upstream * predict(...))` with respect to the
    /// lookback values, holding masks fixed. Needed when a trainable block
    /// sits in front of the forecaster.
    fn input_vjp(
        &self,
        lookback: &GriddedWindow,
        query: &GriddedWindow,
        upstream: &Mat,
    ) -> Result<Mat>;

    /// Digest of all parameters; constant across an online run.
    fn param_checksum(&self) -> u64;
}

fn check_shapes(dims: &GridDims, lookback: &GriddedWindow, query: &GriddedWindow) -> Result<()> {
    lookback.values.require_shape(dims.l_in, dims.n_vars, "lookback values")?;
    lookback.mask.require_shape(dims.l_in, dims.n_vars, "lookback mask")?;
    query.mask.require_shape(dims.l_out, dims.n_vars, "query mask")?;
    Ok(())
}

/// Per variable, carries the last observed lookback value to every query
/// slot; a variable with no observed lookback cell predicts 0.
#[derive(Clone, Debug)]
pub struct LocfForecaster {
    dims: GridDims,
}

impl LocfForecaster {
    pub fn new(dims: GridDims) -> Self {
        LocfForecaster { dims }
    }

    /// Row index of the last observed cell per variable.
    fn last_observed(&self, lookback: &GriddedWindow) -> Vec<Option<usize>> {
        (0..self.dims.n_vars)
            .map(|c| (0..self.dims.l_in).rev().find(|&r| lookback.mask.get(r, c) == 1.0))
            .collect()
    }
}

impl SourceForecaster for LocfForecaster {
    fn dims(&self) -> GridDims {
        self.dims
    }

    fn kind(&self) -> &'static str {
        "locf"
    }

    fn predict(&self, lookback: &GriddedWindow, query: &GriddedWindow) -> Result<Mat> {
        check_shapes(&self.dims, lookback, query)?;
        let mut out = Mat::zeros(self.dims.l_out, self.dims.n_vars);
        for (c, last) in self.last_observed(lookback).into_iter().enumerate() {
            if let Some(r) = last {
                let v = lookback.values.get(r, c);
                for l in 0..self.dims.l_out {
                    out.set(l, c, v);
                }
            }
        }
        Ok(out)
    }

    fn input_vjp(
        &self,
        lookback: &GriddedWindow,
        query: &GriddedWindow,
        upstream: &Mat,
    ) -> Result<Mat> {
        check_shapes(&self.dims, lookback, query)?;
        upstream.require_shape(self.dims.l_out, self.dims.n_vars, "upstream")?;
        let mut out = Mat::zeros(self.dims.l_in, self.dims.n_vars);
        for (c, last) in self.last_observed(lookback).into_iter().enumerate() {
            if let Some(r) = last {
                let g: f64 = (0..self.dims.l_out).map(|l| upstream.get(l, c)).sum();
                out.set(r, c, g);
            }
        }
        Ok(out)
    }

    fn param_checksum(&self) -> u64 {
        struct Empty;
        impl ParamSet for Empty {
            fn for_each_param(&self, _: &mut dyn FnMut(&str, &Param)) {}
            fn for_each_param_mut(&mut self, _: &mut dyn FnMut(&str, &mut Param)) {}
        }
        checksum(&Empty)
    }
}

/// Per variable `c`, one affine map from the concatenated (masked values,
/// mask) lookback column pair to the forecast column:
/// `y_c = A_c [v_c * m_c ; m_c] + d_c`.
#[derive(Clone, Debug)]
pub struct LinearGridForecaster {
    dims: GridDims,
    /// One (l_out x 2 l_in) map per variable.
    a: Vec<Param>,
    /// One (l_out x 1) intercept per variable.
    d: Vec<Param>,
}

impl LinearGridForecaster {
    /// Zero-initialized: predicts 0 everywhere until trained.
    pub fn new(dims: GridDims) -> Self {
        let a = (0..dims.n_vars).map(|_| Param::zeros(dims.l_out, 2 * dims.l_in)).collect();
        let d = (0..dims.n_vars).map(|_| Param::zeros(dims.l_out, 1)).collect();
        LinearGridForecaster { dims, a, d }
    }

    fn features(&self, lookback: &GriddedWindow, c: usize) -> Vec<f64> {
        let l_in = self.dims.l_in;
        let mut x = vec![0.0; 2 * l_in];
        for r in 0..l_in {
            let m = lookback.mask.get(r, c);
            x[r] = lookback.values.get(r, c) * m;
            x[l_in + r] = m;
        }
        x
    }
}

impl SourceForecaster for LinearGridForecaster {
    fn dims(&self) -> GridDims {
        self.dims
    }

    fn kind(&self) -> &'static str {
        "linear_grid"
    }

    fn predict(&self, lookback: &GriddedWindow, query: &GriddedWindow) -> Result<Mat> {
        check_shapes(&self.dims, lookback, query)?;
        let mut out = Mat::zeros(self.dims.l_out, self.dims.n_vars);
        for c in 0..self.dims.n_vars {
            let x = self.features(lookback, c);
            let y = self.a[c].value.matvec(&x);
            for (l, yl) in y.into_iter().enumerate() {
                out.set(l, c, yl + self.d[c].value.get(l, 0));
            }
        }
        if !out.all_finite() {
            return Err(Error::NonFinite("forecaster prediction".into()));
        }
        Ok(out)
    }

    fn input_vjp(
        &self,
        lookback: &GriddedWindow,
        query: &GriddedWindow,
        upstream: &Mat,
    ) -> Result<Mat> {
        check_shapes(&self.dims, lookback, query)?;
        upstream.require_shape(self.dims.l_out, self.dims.n_vars, "upstream")?;
        let l_in = self.dims.l_in;
        let mut out = Mat::zeros(l_in, self.dims.n_vars);
        for c in 0..self.dims.n_vars {
            let u: Vec<f64> = (0..self.dims.l_out).map(|l| upstream.get(l, c)).collect();
            // d y_c / d v_c[r] = A_c[:, r] * m_c[r].
            let g = self.a[c].value.matvec_t(&u);
            for r in 0..l_in {
                out.set(r, c, g[r] * lookback.mask.get(r, c));
            }
        }
        Ok(out)
    }

    fn param_checksum(&self) -> u64 {
        checksum(self)
    }
}

impl ParamSet for LinearGridForecaster {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param)) {
        for c in 0..self.dims.n_vars {
            f(&format!("A{c}"), &self.a[c]);
            f(&format!("d{c}"), &self.d[c]);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for c in 0..self.dims.n_vars {
            f(&format!("A{c}"), &mut self.a[c]);
            f(&format!("d{c}"), &mut self.d[c]);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-2, batch_size: 32, max_epochs: 300, patience: 5, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_valid_mse: f64,
}

/// Masked mean squared error of a forecaster over a gridded dataset.
/// Examples whose target mask is empty are skipped.
pub fn dataset_mse(f: &dyn SourceForecaster, data: &[GriddedExample]) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for ex in data {
        let pred = f.predict(&ex.lookback, &ex.query)?;
        match masked_mse(&pred, &ex.target) {
            Ok(e) => {
                acc += e;
                n += 1;
            }
            Err(Error::EmptyTarget) => continue,
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(acc / n as f64)
}

/// Minibatch Adam on the affine maps, early-stopped on validation error with
/// best-parameter restore. With an empty validation set the training error
/// drives the stopping rule instead.
pub fn train_offline(
    f: &mut LinearGridForecaster,
    train: &[GriddedExample],
    valid: &[GriddedExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let eval_set = if valid.is_empty() { train } else { valid };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = dataset_mse(f, eval_set)?;
    let mut best_params = export_values(f);
    let mut stale = 0usize;
    let mut epochs_run = 0usize;

    for _epoch in 0..cfg.max_epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &train[i];
                let n_obs = ex.target.observed_count();
                if n_obs == 0 {
                    continue;
                }
                let pred = f.predict(&ex.lookback, &ex.query)?;
                // d masked_mse / d pred = 2 m (pred - y) / n_obs, averaged
                // over the batch.
                for c in 0..f.dims.n_vars {
                    let x = f.features(&ex.lookback, c);
                    for l in 0..f.dims.l_out {
                        if ex.target.mask.get(l, c) != 1.0 {
                            continue;
                        }
                        let u = 2.0 * (pred.get(l, c) - ex.target.values.get(l, c))
                            / n_obs as f64
                            * inv;
                        for (j, xj) in x.iter().enumerate() {
                            f.a[c].grad.add_at(l, j, u * xj);
                        }
                        f.d[c].grad.add_at(l, 0, u);
                    }
                }
            }
            adam_step(f, cfg.lr)?;
        }
        let err = dataset_mse(f, eval_set)?;
        if err < best {
            best = err;
            best_params = export_values(f);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    import_values(f, &best_params)?;
    Ok(TrainReport { epochs_run, best_valid_mse: best })
}

/// Persist a forecaster with enough metadata to rebuild it.
pub fn save_forecaster(path: &std::path::Path, f: &dyn SourceForecaster) -> Result<()> {
    let dims = f.dims();
    let meta = serde_json::json!({
        "forecaster": f.kind(),
        "l_in": dims.l_in,
        "l_out": dims.l_out,
        "n_vars": dims.n_vars,
    });
    struct Empty;
    impl ParamSet for Empty {
        fn for_each_param(&self, _: &mut dyn FnMut(&str, &Param)) {}
        fn for_each_param_mut(&mut self, _: &mut dyn FnMut(&str, &mut Param)) {}
    }
    match f.kind() {
        "locf" => save_checkpoint(path, "forecaster", meta, &Empty),
        "linear_grid" => {
            // Round-trip through the trait object is not possible; callers
            // hold the concrete type when saving a trainable forecaster.
            Err(Error::Checkpoint("use save_linear_grid for trainable forecasters".into()))
        }
        other => Err(Error::Checkpoint(format!("unknown forecaster kind {other}"))),
    }
}

pub fn save_linear_grid(path: &std::path::Path, f: &LinearGridForecaster) -> Result<()> {
    let meta = serde_json::json!({
        "forecaster": f.kind(),
        "l_in": f.dims.l_in,
        "l_out": f.dims.l_out,
        "n_vars": f.dims.n_vars,
    });
    save_checkpoint(path, "forecaster", meta, f)
}

/// Rebuild a forecaster from a checkpoint written by the savers above.
pub fn load_forecaster(path: &std::path::Path) -> Result<Box<dyn SourceForecaster>> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "forecaster" {
        return Err(Error::Checkpoint(format!(
            "expected a forecaster checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let dims = GridDims {
        l_in: ckpt.meta_u64("l_in")? as usize,
        l_out: ckpt.meta_u64("l_out")? as usize,
        n_vars: ckpt.meta_u64("n_vars")? as usize,
    };
    if dims.l_in == 0 || dims.l_out == 0 || dims.n_vars == 0 {
        return Err(Error::Checkpoint("forecaster dimensions must be positive".into()));
    }
    match ckpt.meta_str("forecaster")? {
        "locf" => Ok(Box::new(LocfForecaster::new(dims))),
        "linear_grid" => {
            let mut f = LinearGridForecaster::new(dims);
            ckpt.restore(&mut f)?;
            Ok(Box::new(f))
        }
        other => Err(Error::Checkpoint(format!("unknown forecaster kind {other:?}"))),
    }
}
