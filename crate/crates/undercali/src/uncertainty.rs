//! Uncertainty estimation for forecasts: a small MLP scores each prediction
//! in (0,1), trained against normalized masked errors. Normalization uses an
//! expanding min/max range over the raw squared error, seeded during
//! offline pretraining and optionally continued online.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffkit::{
    adam_step, export_values, import_values, load_checkpoint, save_checkpoint, zero_grads,
    Activation, Mlp, Param, ParamSet,
};
use crate::error::{Error, Result};
use crate::forecaster::{GridDims, SourceForecaster};
use crate::imts_data::{masked_sq_norm, GriddedExample, GriddedWindow};
use crate::mat::Mat;

/// Expanding min/max over observed raw errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunningRange {
    delta_min: f64,
    delta_max: f64,
    initialized: bool,
}

impl Default for RunningRange {
    fn default() -> Self {
        Self::new()
    }
}

impl RunningRange {
    pub fn new() -> Self {
        RunningRange { delta_min: f64::INFINITY, delta_max: f64::NEG_INFINITY, initialized: false }
    }

    pub fn from_bounds(delta_min: f64, delta_max: f64) -> Result<Self> {
        if !(delta_min <= delta_max) {
            return Err(Error::Invariant(format!(
                "range bounds out of order: {delta_min} > {delta_max}"
            )));
        }
        Ok(RunningRange { delta_min, delta_max, initialized: true })
    }

    pub fn initialized(&self) -> bool {
        self.initialized
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.initialized.then_some((self.delta_min, self.delta_max))
    }

    /// Expand to include `delta`. Min never increases, max never decreases.
    pub fn observe(&mut self, delta: f64) {
        if delta < self.delta_min {
            self.delta_min = delta;
        }
        if delta > self.delta_max {
            self.delta_max = delta;
        }
        self.initialized = true;
    }

    /// `(delta - min) / (max - min)`, clamped to [0,1]; 0 when the range is
    /// degenerate or unseeded.
    pub fn normalize(&self, delta: f64) -> f64 {
        if !self.initialized || self.delta_max <= self.delta_min {
            return 0.0;
        }
        ((delta - self.delta_min) / (self.delta_max - self.delta_min)).clamp(0.0, 1.0)
    }

    /// Expand by `delta`, then normalize it.
    pub fn target(&mut self, delta: f64) -> f64 {
        self.observe(delta);
        self.normalize(delta)
    }
}

/// Whether the normalization range keeps expanding during online updates or
/// stays as pretrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RangeMode {
    Frozen,
    Expanding,
}

/// Normalized error target for one prediction: raw masked squared norm
/// pushed through the (expanded) range.
pub fn normalized_error(
    range: &mut RunningRange,
    pred: &Mat,
    target: &GriddedWindow,
) -> Result<f64> {
    Ok(range.target(masked_sq_norm(pred, target)?))
}

#[derive(Clone, Debug)]
pub struct UncertaintyEstimator {
    pub mlp: Mlp,
    pub range: RunningRange,
    dims: GridDims,
}

pub fn feature_width(dims: GridDims) -> usize {
    2 * dims.l_in * dims.n_vars + 2 * dims.l_out * dims.n_vars
}

impl UncertaintyEstimator {
    pub fn new(dims: GridDims, rng: &mut impl Rng) -> Self {
        let mlp = Mlp::xavier(
            "ue",
            &[feature_width(dims), 64, 64, 1],
            &[Activation::Tanh, Activation::Tanh, Activation::Sigmoid],
            rng,
        );
        UncertaintyEstimator { mlp, range: RunningRange::new(), dims }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    /// `[masked lookback values, lookback mask, prediction, query mask]`,
    /// each flattened row-major.
    pub fn featurize(
        &self,
        lookback: &GriddedWindow,
        prediction: &Mat,
        query_mask: &Mat,
    ) -> Result<Vec<f64>> {
        let d = self.dims;
        lookback.values.require_shape(d.l_in, d.n_vars, "lookback values")?;
        lookback.mask.require_shape(d.l_in, d.n_vars, "lookback mask")?;
        prediction.require_shape(d.l_out, d.n_vars, "prediction")?;
        query_mask.require_shape(d.l_out, d.n_vars, "query mask")?;
        let mut x = Vec::with_capacity(feature_width(d));
        x.extend(
            lookback.values.as_slice().iter().zip(lookback.mask.as_slice()).map(|(v, m)| v * m),
        );
        x.extend_from_slice(lookback.mask.as_slice());
        x.extend_from_slice(prediction.as_slice());
        x.extend_from_slice(query_mask.as_slice());
        Ok(x)
    }

    fn score_features(&self, x: &[f64]) -> Result<f64> {
        let row = Mat::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.mlp.forward(&row)?.get(0, 0))
    }

    /// Uncertainty score in (0,1) for a prediction on its lookback context.
    pub fn estimate(
        &self,
        lookback: &GriddedWindow,
        prediction: &Mat,
        query_mask: &Mat,
    ) -> Result<f64> {
        self.score_features(&self.featurize(lookback, prediction, query_mask)?)
    }
}

impl ParamSet for UncertaintyEstimator {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.mlp.for_each_param(f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.mlp.for_each_param_mut(f);
    }
}

/// Mean absolute error between scores and targets, with its subgradient
/// accumulated into the MLP when `with_grads` is set. sign(0) is taken as 0.
pub(crate) fn l1_pass(
    ue: &mut UncertaintyEstimator,
    x: &Mat,
    u: &[f64],
    with_grads: bool,
) -> Result<f64> {
    let trace = ue.mlp.trace(x)?;
    let out = trace.output();
    let n = u.len();
    let mut loss = 0.0;
    let mut upstream = Mat::zeros(n, 1);
    for i in 0..n {
        let r = out.get(i, 0) - u[i];
        loss += r.abs();
        upstream.set(i, 0, r.signum() * (r != 0.0) as u8 as f64 / n as f64);
    }
    if with_grads {
        ue.mlp.backward(&trace, &upstream)?;
    }
    Ok(loss / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct UePretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for UePretrainConfig {
    fn default() -> Self {
        UePretrainConfig { lr: 1e-3, batch_size: 32, max_epochs: 300, patience: 10, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct UePretrainReport {
    pub epochs_run: usize,
    pub best_valid_l1: f64,
    /// L1 of the best constant predictor (the median target) on the same
    /// validation targets; a sanity baseline.
    pub constant_baseline_l1: f64,
}

fn features_and_deltas(
    ue: &UncertaintyEstimator,
    f: &dyn SourceForecaster,
    data: &[GriddedExample],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut xs = Vec::new();
    let mut deltas = Vec::new();
    for ex in data {
        if ex.target.observed_count() == 0 {
            continue;
        }
        let pred = f.predict(&ex.lookback, &ex.query)?;
        xs.push(ue.featurize(&ex.lookback, &pred, &ex.query.mask)?);
        deltas.push(masked_sq_norm(&pred, &ex.target)?);
    }
    Ok((xs, deltas))
}

fn stack(xs: &[Vec<f64>]) -> Mat {
    Mat::from_rows(xs).expect("feature rows are uniform width")
}

/// Offline pretraining against the source forecaster's raw errors.
///
/// The range is seeded from every training error before targets are
/// computed, so training targets span [0,1]. Validation errors are
/// normalized with that same range, without expanding it.
pub fn pretrain(
    ue: &mut UncertaintyEstimator,
    f: &dyn SourceForecaster,
    train: &[GriddedExample],
    valid: &[GriddedExample],
    cfg: &UePretrainConfig,
) -> Result<UePretrainReport> {
    let (train_x, train_d) = features_and_deltas(ue, f, train)?;
    if train_x.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    for &d in &train_d {
        ue.range.observe(d);
    }
    let train_u: Vec<f64> = train_d.iter().map(|&d| ue.range.normalize(d)).collect();
    let (valid_x, valid_d) = features_and_deltas(ue, f, valid)?;
    let valid_u: Vec<f64> = valid_d.iter().map(|&d| ue.range.normalize(d)).collect();

    let (eval_x, eval_u) = if valid_x.is_empty() {
        (stack(&train_x), train_u.clone())
    } else {
        (stack(&valid_x), valid_u.clone())
    };

    let mut sorted = train_u.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let constant_baseline_l1 =
        eval_u.iter().map(|u| (u - median).abs()).sum::<f64>() / eval_u.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut best = l1_pass(ue, &eval_x, &eval_u, false)?;
    let mut best_params = export_values(ue);
    let mut stale = 0usize;
    let mut epochs_run = 0usize;

    use rand::seq::SliceRandom;
    for _ in 0..cfg.max_epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| train_x[i].clone()).collect();
            let bu: Vec<f64> = chunk.iter().map(|&i| train_u[i]).collect();
            l1_pass(ue, &stack(&bx), &bu, true)?;
            adam_step(ue, cfg.lr)?;
        }
        let err = l1_pass(ue, &eval_x, &eval_u, false)?;
        if err < best {
            best = err;
            best_params = export_values(ue);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    import_values(ue, &best_params)?;
    Ok(UePretrainReport { epochs_run, best_valid_l1: best, constant_baseline_l1 })
}

#[derive(Clone, Debug)]
pub struct UeUpdateReport {
    /// L1 against the fresh targets before any step; `None` if skipped.
    pub l1_before: Option<f64>,
    pub skipped: bool,
}

/// Online update on a reliable subset: targets are the normalized errors of
/// the supplied calibrated predictions, computed once per call, then
/// `n_steps` Adam steps on the L1 objective. An empty subset or a non-finite
/// loss leaves the estimator untouched.
pub fn update_online(
    ue: &mut UncertaintyEstimator,
    subset: &[(&GriddedExample, &Mat)],
    n_steps: usize,
    lr: f64,
    range_mode: RangeMode,
) -> Result<UeUpdateReport> {
    let mut xs = Vec::new();
    let mut us = Vec::new();
    for (ex, pred) in subset {
        if ex.target.observed_count() == 0 {
            continue;
        }
        let delta = masked_sq_norm(pred, &ex.target)?;
        let u = match range_mode {
            RangeMode::Expanding => ue.range.target(delta),
            RangeMode::Frozen => ue.range.normalize(delta),
        };
        xs.push(ue.featurize(&ex.lookback, pred, &ex.query.mask)?);
        us.push(u);
    }
    if xs.is_empty() {
        return Ok(UeUpdateReport { l1_before: None, skipped: true });
    }
    let x = stack(&xs);
    let before = l1_pass(ue, &x, &us, false)?;
    if !before.is_finite() {
        return Ok(UeUpdateReport { l1_before: Some(before), skipped: true });
    }
    let snapshot = export_values(ue);
    for _ in 0..n_steps {
        let loss = l1_pass(ue, &x, &us, true)?;
        if !loss.is_finite() || adam_step(ue, lr).is_err() {
            zero_grads(ue);
            import_values(ue, &snapshot)?;
            return Ok(UeUpdateReport { l1_before: Some(before), skipped: true });
        }
    }
    Ok(UeUpdateReport { l1_before: Some(before), skipped: false })
}

pub fn save_ue(path: &std::path::Path, ue: &UncertaintyEstimator) -> Result<()> {
    let d = ue.dims;
    let (delta_min, delta_max) = ue
        .range
        .bounds()
        .ok_or_else(|| Error::Checkpoint("refusing to save an unseeded range".into()))?;
    let meta = serde_json::json!({
        "l_in": d.l_in,
        "l_out": d.l_out,
        "n_vars": d.n_vars,
        "delta_min": delta_min,
        "delta_max": delta_max,
    });
    save_checkpoint(path, "ue", meta, ue)
}

pub fn load_ue(path: &std::path::Path) -> Result<UncertaintyEstimator> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "ue" {
        return Err(Error::Checkpoint(format!(
            "expected an uncertainty-estimator checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let dims = GridDims {
        l_in: ckpt.meta_u64("l_in")? as usize,
        l_out: ckpt.meta_u64("l_out")? as usize,
        n_vars: ckpt.meta_u64("n_vars")? as usize,
    };
    if dims.l_in == 0 || dims.l_out == 0 || dims.n_vars == 0 {
        return Err(Error::Checkpoint("estimator dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ue = UncertaintyEstimator::new(dims, &mut rng);
    ckpt.restore(&mut ue)?;
    ue.range = RunningRange::from_bounds(ckpt.meta_f64("delta_min")?, ckpt.meta_f64("delta_max")?)?;
    Ok(ue)
}
