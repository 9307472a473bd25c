//! The online loop: per batch, an inference stage that produces calibrated
//! predictions before ground truth is visible, then an adaptation stage
//! that uses the revealed targets to update the experts and the uncertainty
//! estimator when the trigger fires.
//!
//! Causality is the load-bearing property here: recorded predictions for
//! batch t depend only on offline artifacts, targets of batches before t,
//! and batch t inputs. [`causality_audit`] proves it mechanically on any
//! stream, including a negative control that must fail.
//!
//! The loop is sequential by protocol; per-sample forward passes inside a
//! batch are pure and could fan out, but nothing here needs threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::arm::{batch_moments, route, ArmState};
use crate::error::{Error, Result};
use crate::forecaster::SourceForecaster;
use crate::gdc::{expert_adapt, AdaptOptions, Expert, InputCali, LossNorm};
use crate::imts_data::GriddedExample;
use crate::mat::Mat;
use crate::uncertainty::{update_online, RangeMode, UncertaintyEstimator};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dual experts, threshold routing, statistic-driven triggering.
    Full,
    /// One expert calibrates every sample; triggering still active.
    SingleExpertJoint,
    /// One expert for reliable samples; unreliable samples pass through raw.
    SingleExpertReliable,
    /// One expert for unreliable samples; preliminary predictions are raw.
    SingleExpertUnreliable,
    /// Full routing, but the trigger is a coin flip.
    RandomTriggering,
    /// Full triggering, but the partition is a coin flip per sample.
    RandomAllocating,
    /// No uncertainty estimator: one expert, every sample, every batch.
    NoUeSingleJoint,
    /// Raw forecaster; nothing updates. Scores are telemetry only.
    Frozen,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::SingleExpertJoint => "single_expert_joint",
            Mode::SingleExpertReliable => "single_expert_reliable",
            Mode::SingleExpertUnreliable => "single_expert_unreliable",
            Mode::RandomTriggering => "random_triggering",
            Mode::RandomAllocating => "random_allocating",
            Mode::NoUeSingleJoint => "no_ue_single_joint",
            Mode::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Ok(match s {
            "full" => Mode::Full,
            "single_expert_joint" => Mode::SingleExpertJoint,
            "single_expert_reliable" => Mode::SingleExpertReliable,
            "single_expert_unreliable" => Mode::SingleExpertUnreliable,
            "random_triggering" => Mode::RandomTriggering,
            "random_allocating" => Mode::RandomAllocating,
            "no_ue_single_joint" => Mode::NoUeSingleJoint,
            "frozen" => Mode::Frozen,
            other => return Err(Error::Config(format!("unknown mode {other:?}"))),
        })
    }

    pub fn needs_ue(&self) -> bool {
        !matches!(self, Mode::NoUeSingleJoint | Mode::Frozen)
    }

    pub fn all() -> [Mode; 8] {
        [
            Mode::Full,
            Mode::SingleExpertJoint,
            Mode::SingleExpertReliable,
            Mode::SingleExpertUnreliable,
            Mode::RandomTriggering,
            Mode::RandomAllocating,
            Mode::NoUeSingleJoint,
            Mode::Frozen,
        ]
    }
}

/// Which expert parameters the uncertainty targets are computed against:
/// the reliable expert as it was during inference, or after this batch's
/// update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UeTarget {
    PreUpdate,
    PostUpdate,
}

/// Gaussian perturbation of the uncertainty scores over a batch window,
/// for stability probes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub variance: f64,
    pub start_batch: usize,
    pub n_batches: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub mode: Mode,
    pub inner_steps: usize,
    pub lr_reliable: f64,
    pub lr_unreliable: f64,
    pub lr_ue: f64,
    pub alpha_alloc: f64,
    pub kappa_alloc: f64,
    pub alpha_trig: f64,
    pub kappa_trig: f64,
    pub batch_size: usize,
    pub random_trigger_p: f64,
    pub loss_norm: LossNorm,
    pub input_cali: InputCali,
    pub range_mode: RangeMode,
    pub ue_target: UeTarget,
    pub seed: u64,
    /// Skip the adaptation stage for exactly this batch index (audit use).
    pub skip_adapt_at: Option<usize>,
    /// Score perturbation window (stability probes).
    pub noise: Option<NoiseSpec>,
    /// Deliberately run adaptation before recording predictions. This
    /// breaks the protocol on purpose; it exists so the causality audit has
    /// a true positive to detect.
    #[doc(hidden)]
    pub leak_adapt_before_predict: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: Mode::Full,
            inner_steps: 5,
            lr_reliable: 1e-3,
            lr_unreliable: 1e-4,
            lr_ue: 1e-3,
            alpha_alloc: 0.75,
            kappa_alloc: 0.25,
            alpha_trig: 0.25,
            kappa_trig: 0.75,
            batch_size: 32,
            random_trigger_p: 0.85,
            loss_norm: LossNorm::PerObs,
            input_cali: InputCali::FullGrad,
            range_mode: RangeMode::Expanding,
            ue_target: UeTarget::PostUpdate,
            seed: 0,
            skip_adapt_at: None,
            noise: None,
            leak_adapt_before_predict: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.random_trigger_p) {
            return Err(Error::Config(format!(
                "random trigger probability {} outside [0, 1]",
                self.random_trigger_p
            )));
        }
        for (name, lr) in [
            ("lr_reliable", self.lr_reliable),
            ("lr_unreliable", self.lr_unreliable),
            ("lr_ue", self.lr_ue),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        for (name, a) in [("alpha_alloc", self.alpha_alloc), ("alpha_trig", self.alpha_trig)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("{name} {a} outside [0, 1]")));
            }
        }
        for (name, k) in [("kappa_alloc", self.kappa_alloc), ("kappa_trig", self.kappa_trig)] {
            if !k.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Everything observable about one processed batch. Predictions and metrics
/// are from the inference stage; the adaptation fields describe what
/// happened afterwards.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub batch_index: usize,
    pub n_samples: usize,
    /// Final recorded prediction per sample, in batch order.
    pub predictions: Vec<Mat>,
    /// Uncertainty score per sample; empty when no estimator runs.
    pub scores: Vec<f64>,
    pub reliable_idx: Vec<usize>,
    pub unreliable_idx: Vec<usize>,
    pub triggered: bool,
    /// Cell-pooled over the batch's observed target cells; NaN if none.
    pub mse: f64,
    pub mae: f64,
    pub n_obs: usize,
    pub mean_uncertainty: f64,
    pub u_var: f64,
    pub mu_alloc: f64,
    pub sigma_alloc: f64,
    pub tau_alloc: f64,
    pub mu_trig: f64,
    pub sigma_trig: f64,
    pub tau_trig: f64,
    /// True when a triggered batch had no evaluable targets and adaptation
    /// was skipped.
    pub adapt_skipped: bool,
}

pub struct Engine<'a> {
    f: &'a dyn SourceForecaster,
    pub ue: Option<UncertaintyEstimator>,
    pub reliable: Expert,
    pub unreliable: Expert,
    pub arm: ArmState,
    cfg: EngineConfig,
    rng: ChaCha8Rng,
    batch_index: usize,
    f_checksum: u64,
}

impl<'a> Engine<'a> {
    pub fn new(
        f: &'a dyn SourceForecaster,
        ue: Option<UncertaintyEstimator>,
        cfg: EngineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode.needs_ue() && ue.is_none() {
            return Err(Error::Config(format!(
                "mode {} requires an uncertainty estimator",
                cfg.mode.as_str()
            )));
        }
        if let Some(ue) = &ue {
            if ue.dims() != f.dims() {
                return Err(Error::Config(
                    "uncertainty estimator and forecaster dimensions disagree".into(),
                ));
            }
        }
        // This mode runs without an estimator even if one is supplied.
        let ue = if cfg.mode == Mode::NoUeSingleJoint { None } else { ue };
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dims = f.dims();
        let reliable = Expert::new("reliable", dims, cfg.lr_reliable, &mut init_rng);
        let unreliable = Expert::new("unreliable", dims, cfg.lr_unreliable, &mut init_rng);
        let arm = ArmState::new(cfg.alpha_alloc, cfg.kappa_alloc, cfg.alpha_trig, cfg.kappa_trig)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0xdec1de);
        Ok(Engine {
            f_checksum: f.param_checksum(),
            f,
            ue,
            reliable,
            unreliable,
            arm,
            cfg,
            rng,
            batch_index: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn forecaster_unchanged(&self) -> bool {
        self.f.param_checksum() == self.f_checksum
    }

    /// Decision-time trigger statistics, NaN before the first commit.
    fn trig_telemetry(&self) -> (f64, f64) {
        if self.arm.trig.seen_first {
            (self.arm.trig.mu, self.arm.trig.sigma())
        } else {
            (f64::NAN, f64::NAN)
        }
    }

    fn scores_with_noise(&mut self, scores: &mut [f64]) {
        let Some(spec) = self.cfg.noise else { return };
        let within = self.batch_index >= spec.start_batch
            && self.batch_index < spec.start_batch + spec.n_batches;
        if !within || spec.variance == 0.0 {
            return;
        }
        let sd = spec.variance.sqrt();
        let mut nrng = ChaCha8Rng::seed_from_u64(spec.seed);
        nrng.set_stream(self.batch_index as u64);
        for u in scores.iter_mut() {
            let e: f64 = nrng.sample(StandardNormal);
            *u = (*u + sd * e).clamp(0.0, 1.0);
        }
    }

    /// Inference stage: preliminary calibration, scoring, allocation,
    /// secondary calibration. No target is read anywhere in here.
    fn infer(
        &mut self,
        batch: &[GriddedExample],
    ) -> Result<(Vec<Mat>, Vec<f64>, Vec<usize>, Vec<usize>, f64)> {
        let mode = self.cfg.mode;
        let prelim_raw =
            matches!(mode, Mode::SingleExpertUnreliable | Mode::Frozen);
        let mut predictions = Vec::with_capacity(batch.len());
        for ex in batch {
            let p = if prelim_raw {
                self.f.predict(&ex.lookback, &ex.query)?
            } else {
                self.reliable.forward(self.f, &ex.lookback, &ex.query)?
            };
            predictions.push(p);
        }

        let mut scores = Vec::new();
        if let Some(ue) = &self.ue {
            for (ex, p) in batch.iter().zip(&predictions) {
                scores.push(ue.estimate(&ex.lookback, p, &ex.query.mask)?);
            }
        }
        self.scores_with_noise(&mut scores);

        let mut tau_alloc = f64::NAN;
        let (reliable_idx, unreliable_idx) = match mode {
            Mode::Full
            | Mode::SingleExpertReliable
            | Mode::SingleExpertUnreliable
            | Mode::RandomTriggering => {
                tau_alloc = self.arm.allocation_threshold(&scores)?;
                route(&scores, tau_alloc)
            }
            Mode::RandomAllocating => {
                tau_alloc = self.arm.allocation_threshold(&scores)?;
                let mut rel = Vec::new();
                let mut unrel = Vec::new();
                for i in 0..batch.len() {
                    if self.rng.random::<bool>() {
                        rel.push(i);
                    } else {
                        unrel.push(i);
                    }
                }
                (rel, unrel)
            }
            Mode::SingleExpertJoint | Mode::NoUeSingleJoint | Mode::Frozen => {
                ((0..batch.len()).collect(), Vec::new())
            }
        };

        // Secondary calibration for the unreliable side.
        match mode {
            Mode::Full | Mode::RandomTriggering | Mode::RandomAllocating
            | Mode::SingleExpertUnreliable => {
                for &i in &unreliable_idx {
                    predictions[i] =
                        self.unreliable.forward(self.f, &batch[i].lookback, &batch[i].query)?;
                }
            }
            Mode::SingleExpertReliable => {
                // Unreliable samples bypass calibration entirely.
                for &i in &unreliable_idx {
                    predictions[i] = self.f.predict(&batch[i].lookback, &batch[i].query)?;
                }
            }
            Mode::SingleExpertJoint | Mode::NoUeSingleJoint | Mode::Frozen => {}
        }
        Ok((predictions, scores, reliable_idx, unreliable_idx, tau_alloc))
    }

    /// Adaptation stage: trigger decision on previous statistics, expert and
    /// estimator updates on this batch's revealed targets, statistics
    /// commit.
    fn adapt(
        &mut self,
        batch: &[GriddedExample],
        predictions: &[Mat],
        scores: &[f64],
        reliable_idx: &[usize],
        unreliable_idx: &[usize],
        n_obs: usize,
    ) -> Result<(bool, f64, f64, f64, bool)> {
        let mode = self.cfg.mode;
        let (triggered, tau_trig, mu_trig, sigma_trig) = match mode {
            Mode::Frozen => (false, f64::NAN, f64::NAN, f64::NAN),
            Mode::NoUeSingleJoint => (true, f64::NAN, f64::NAN, f64::NAN),
            Mode::RandomTriggering => {
                let d = self.arm.trigger_decision(scores)?;
                let coin = self.rng.random::<f64>() < self.cfg.random_trigger_p;
                let (mu, sigma) = self.trig_telemetry();
                (coin, d.threshold, mu, sigma)
            }
            _ => {
                let d = self.arm.trigger_decision(scores)?;
                let (mu, sigma) = self.trig_telemetry();
                (d.triggered, d.threshold, mu, sigma)
            }
        };

        let skip_here = self.cfg.skip_adapt_at == Some(self.batch_index);
        let no_targets = n_obs == 0;
        let adapt_skipped = triggered && no_targets;
        if triggered && !skip_here && !no_targets && mode != Mode::Frozen {
            let opts = AdaptOptions {
                n_steps: self.cfg.inner_steps,
                loss_norm: self.cfg.loss_norm,
                input_cali: self.cfg.input_cali,
            };
            let gather = |idx: &[usize]| -> Vec<&GriddedExample> {
                idx.iter().map(|&i| &batch[i]).collect()
            };
            match mode {
                Mode::Full | Mode::RandomTriggering | Mode::RandomAllocating => {
                    let b_r = gather(reliable_idx);
                    if !b_r.is_empty() {
                        expert_adapt(&mut self.reliable, self.f, &b_r, &opts)?;
                    }
                    let b_ur = gather(unreliable_idx);
                    if !b_ur.is_empty() {
                        expert_adapt(&mut self.unreliable, self.f, &b_ur, &opts)?;
                    }
                    self.update_ue(batch, predictions, reliable_idx, true)?;
                }
                Mode::SingleExpertJoint => {
                    let all = gather(reliable_idx);
                    if !all.is_empty() {
                        expert_adapt(&mut self.reliable, self.f, &all, &opts)?;
                    }
                    self.update_ue(batch, predictions, reliable_idx, true)?;
                }
                Mode::SingleExpertReliable => {
                    let b_r = gather(reliable_idx);
                    if !b_r.is_empty() {
                        expert_adapt(&mut self.reliable, self.f, &b_r, &opts)?;
                    }
                    self.update_ue(batch, predictions, reliable_idx, true)?;
                }
                Mode::SingleExpertUnreliable => {
                    let b_ur = gather(unreliable_idx);
                    if !b_ur.is_empty() {
                        expert_adapt(&mut self.unreliable, self.f, &b_ur, &opts)?;
                    }
                    // The reliable side is raw forecaster output here, so
                    // the recorded predictions are already current.
                    self.update_ue(batch, predictions, reliable_idx, false)?;
                }
                Mode::NoUeSingleJoint => {
                    let all = gather(reliable_idx);
                    if !all.is_empty() {
                        expert_adapt(&mut self.reliable, self.f, &all, &opts)?;
                    }
                }
                Mode::Frozen => unreachable!(),
            }
        }

        if mode != Mode::Frozen && mode != Mode::NoUeSingleJoint {
            self.arm.commit_trigger_stats(scores)?;
        }
        Ok((triggered, tau_trig, mu_trig, sigma_trig, adapt_skipped))
    }

    /// Uncertainty update on the reliable subset. With post-update targets
    /// the reliable expert's predictions are recomputed after its own
    /// adaptation; otherwise the recorded inference-stage predictions serve.
    fn update_ue(
        &mut self,
        batch: &[GriddedExample],
        recorded: &[Mat],
        reliable_idx: &[usize],
        expert_moved: bool,
    ) -> Result<()> {
        let Some(ue) = self.ue.as_mut() else { return Ok(()) };
        let recomputed: Vec<Mat>;
        let preds: Vec<&Mat> = if expert_moved && self.cfg.ue_target == UeTarget::PostUpdate {
            recomputed = reliable_idx
                .iter()
                .map(|&i| self.reliable.forward(self.f, &batch[i].lookback, &batch[i].query))
                .collect::<Result<_>>()?;
            recomputed.iter().collect()
        } else {
            reliable_idx.iter().map(|&i| &recorded[i]).collect()
        };
        let subset: Vec<(&GriddedExample, &Mat)> =
            reliable_idx.iter().map(|&i| &batch[i]).zip(preds).collect();
        update_online(ue, &subset, self.cfg.inner_steps, self.cfg.lr_ue, self.cfg.range_mode)?;
        Ok(())
    }

    pub fn process_batch(&mut self, batch: &[GriddedExample]) -> Result<BatchOutcome> {
        if batch.is_empty() {
            return Err(Error::Invariant("empty batch".into()));
        }

        let (predictions, scores, reliable_idx, unreliable_idx, tau_alloc);
        let mut early_adapt = None;
        if self.cfg.leak_adapt_before_predict {
            // Protocol violation on purpose: adapt on this batch's targets
            // first, then record predictions. The audit must catch this.
            let (pre, sc, rel, unrel, ta) = self.infer(batch)?;
            let n_obs: usize = batch.iter().map(|ex| ex.target.observed_count()).sum();
            early_adapt = Some(self.adapt(batch, &pre, &sc, &rel, &unrel, n_obs)?);
            predictions = self.infer_readonly(batch, &unrel)?;
            scores = sc;
            reliable_idx = rel;
            unreliable_idx = unrel;
            tau_alloc = ta;
        } else {
            let out = self.infer(batch)?;
            (predictions, scores, reliable_idx, unreliable_idx, tau_alloc) = out;
        }

        // Ground truth becomes visible only from here on.
        let (mse, mae, n_obs) = batch_metrics(batch, &predictions);

        let (mu_alloc, sigma_alloc) = if tau_alloc.is_nan() {
            (f64::NAN, f64::NAN)
        } else {
            (self.arm.alloc.mu, self.arm.alloc.sigma())
        };
        let (mean_uncertainty, u_var) = if scores.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            batch_moments(&scores)?
        };

        let (triggered, tau_trig, mu_trig, sigma_trig, adapt_skipped) = match early_adapt {
            Some(done) => done,
            None => {
                self.adapt(batch, &predictions, &scores, &reliable_idx, &unreliable_idx, n_obs)?
            }
        };

        let outcome = BatchOutcome {
            batch_index: self.batch_index,
            n_samples: batch.len(),
            predictions,
            scores,
            reliable_idx,
            unreliable_idx,
            triggered,
            mse,
            mae,
            n_obs,
            mean_uncertainty,
            u_var,
            mu_alloc,
            sigma_alloc,
            tau_alloc,
            mu_trig,
            sigma_trig,
            tau_trig,
            adapt_skipped,
        };
        self.batch_index += 1;
        Ok(outcome)
    }

    /// Re-run only the prediction path with the existing partition (leak
    /// harness support; no statistics are touched).
    fn infer_readonly(
        &self,
        batch: &[GriddedExample],
        unreliable_idx: &[usize],
    ) -> Result<Vec<Mat>> {
        let mode = self.cfg.mode;
        let prelim_raw = matches!(mode, Mode::SingleExpertUnreliable | Mode::Frozen);
        let mut predictions = Vec::with_capacity(batch.len());
        for ex in batch {
            let p = if prelim_raw {
                self.f.predict(&ex.lookback, &ex.query)?
            } else {
                self.reliable.forward(self.f, &ex.lookback, &ex.query)?
            };
            predictions.push(p);
        }
        match mode {
            Mode::Full | Mode::RandomTriggering | Mode::RandomAllocating
            | Mode::SingleExpertUnreliable => {
                for &i in unreliable_idx {
                    predictions[i] =
                        self.unreliable.forward(self.f, &batch[i].lookback, &batch[i].query)?;
                }
            }
            Mode::SingleExpertReliable => {
                for &i in unreliable_idx {
                    predictions[i] = self.f.predict(&batch[i].lookback, &batch[i].query)?;
                }
            }
            _ => {}
        }
        Ok(predictions)
    }
}

/// Cell-pooled masked error over a batch: (mse, mae, observed cell count).
/// NaN metrics when nothing is observed.
fn batch_metrics(batch: &[GriddedExample], predictions: &[Mat]) -> (f64, f64, usize) {
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut n = 0usize;
    for (ex, pred) in batch.iter().zip(predictions) {
        for ((p, t), m) in pred
            .as_slice()
            .iter()
            .zip(ex.target.values.as_slice())
            .zip(ex.target.mask.as_slice())
        {
            if *m == 1.0 {
                let d = p - t;
                sq += d * d;
                ab += d.abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        (f64::NAN, f64::NAN, 0)
    } else {
        (sq / n as f64, ab / n as f64, n)
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub outcomes: Vec<BatchOutcome>,
    /// Observation-weighted mean squared error over the whole stream.
    pub mse: f64,
    pub mae: f64,
    /// Fraction of batches that triggered adaptation.
    pub update_frequency: f64,
    pub n_batches: usize,
    pub mode: Mode,
    pub seed: u64,
    pub forecaster_unchanged: bool,
}

/// Process a stream in order, one batch at a time.
pub fn run_stream(
    f: &dyn SourceForecaster,
    ue: Option<UncertaintyEstimator>,
    examples: &[GriddedExample],
    cfg: &EngineConfig,
) -> Result<RunReport> {
    let mut engine = Engine::new(f, ue, cfg.clone())?;
    let mut outcomes = Vec::new();
    for batch in examples.chunks(cfg.batch_size) {
        outcomes.push(engine.process_batch(batch)?);
    }
    let report = summarize(outcomes, cfg.mode, cfg.seed, engine.forecaster_unchanged());
    Ok(report)
}

fn summarize(
    outcomes: Vec<BatchOutcome>,
    mode: Mode,
    seed: u64,
    forecaster_unchanged: bool,
) -> RunReport {
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut n = 0usize;
    let mut triggered = 0usize;
    for o in &outcomes {
        if o.n_obs > 0 {
            sq += o.mse * o.n_obs as f64;
            ab += o.mae * o.n_obs as f64;
            n += o.n_obs;
        }
        if o.triggered {
            triggered += 1;
        }
    }
    let n_batches = outcomes.len();
    RunReport {
        mse: if n > 0 { sq / n as f64 } else { f64::NAN },
        mae: if n > 0 { ab / n as f64 } else { f64::NAN },
        update_frequency: if n_batches > 0 { triggered as f64 / n_batches as f64 } else { 0.0 },
        n_batches,
        outcomes,
        mode,
        seed,
        forecaster_unchanged,
    }
}

#[derive(Clone, Debug)]
pub struct CausalityReport {
    /// Truncated rerun reproduced every prefix prediction bitwise.
    pub prefix_identical: bool,
    /// Disabling adaptation for batch t alone left batch t's predictions
    /// unchanged, so recorded metrics precede same-batch updates.
    pub metrics_precede_updates: bool,
    /// The deliberately leaky configuration produced different batch-t
    /// predictions (the audit can catch a real violation).
    pub leak_detected: bool,
    /// Forecaster checksum constant across every run.
    pub forecaster_frozen: bool,
}

impl CausalityReport {
    pub fn passed(&self) -> bool {
        self.prefix_identical
            && self.metrics_precede_updates
            && self.leak_detected
            && self.forecaster_frozen
    }
}

/// Prove the protocol on a concrete stream: truncation invariance, metric
/// ordering, and a negative control. `probe_batch` picks the batch index t
/// under test; it must be early enough that the stream still has batches
/// before and after it.
pub fn causality_audit(
    f: &dyn SourceForecaster,
    ue: &UncertaintyEstimator,
    examples: &[GriddedExample],
    cfg: &EngineConfig,
    probe_batch: usize,
) -> Result<CausalityReport> {
    let n_batches = examples.len().div_ceil(cfg.batch_size);
    if probe_batch + 1 >= n_batches {
        return Err(Error::Config(format!(
            "probe batch {probe_batch} out of range for {n_batches} batches"
        )));
    }
    let mut base_cfg = cfg.clone();
    base_cfg.skip_adapt_at = None;
    base_cfg.leak_adapt_before_predict = false;

    let full = run_stream(f, Some(ue.clone()), examples, &base_cfg)?;

    let cut = (probe_batch + 1) * cfg.batch_size;
    let truncated = run_stream(f, Some(ue.clone()), &examples[..cut.min(examples.len())], &base_cfg)?;
    let prefix_identical = truncated
        .outcomes
        .iter()
        .zip(&full.outcomes)
        .all(|(a, b)| a.predictions == b.predictions);

    let mut skip_cfg = base_cfg.clone();
    skip_cfg.skip_adapt_at = Some(probe_batch);
    let skipped = run_stream(f, Some(ue.clone()), examples, &skip_cfg)?;
    let metrics_precede_updates =
        skipped.outcomes[probe_batch].predictions == full.outcomes[probe_batch].predictions
            && skipped.outcomes[..probe_batch]
                .iter()
                .zip(&full.outcomes)
                .all(|(a, b)| a.predictions == b.predictions);

    let mut leak_cfg = base_cfg.clone();
    leak_cfg.leak_adapt_before_predict = true;
    let leaky = run_stream(f, Some(ue.clone()), examples, &leak_cfg)?;
    let leak_detected = leaky
        .outcomes
        .iter()
        .zip(&full.outcomes)
        .any(|(a, b)| a.predictions != b.predictions);

    let forecaster_frozen = full.forecaster_unchanged
        && truncated.forecaster_unchanged
        && skipped.forecaster_unchanged
        && leaky.forecaster_unchanged;

    Ok(CausalityReport {
        prefix_identical,
        metrics_precede_updates,
        leak_detected,
        forecaster_frozen,
    })
}

#[derive(Clone, Debug)]
pub struct NoiseProbeReport {
    /// Per batch: (clean mse, noisy mse, relative delta).
    pub per_batch: Vec<(f64, f64, f64)>,
    pub noise: NoiseSpec,
}

/// Run the stream twice, clean and with scores perturbed over the given
/// window, and report per-batch error deltas.
pub fn ue_noise_probe(
    f: &dyn SourceForecaster,
    ue: &UncertaintyEstimator,
    examples: &[GriddedExample],
    cfg: &EngineConfig,
    noise: NoiseSpec,
) -> Result<NoiseProbeReport> {
    let mut clean_cfg = cfg.clone();
    clean_cfg.noise = None;
    let clean = run_stream(f, Some(ue.clone()), examples, &clean_cfg)?;

    let mut noisy_cfg = cfg.clone();
    noisy_cfg.noise = Some(noise);
    let noisy = run_stream(f, Some(ue.clone()), examples, &noisy_cfg)?;

    let per_batch = clean
        .outcomes
        .iter()
        .zip(&noisy.outcomes)
        .map(|(c, n)| {
            let rel = if c.mse != 0.0 { (n.mse - c.mse) / c.mse } else { f64::NAN };
            (c.mse, n.mse, rel)
        })
        .collect();
    Ok(NoiseProbeReport { per_batch, noise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::checksum;
    use crate::forecaster::{train_offline, LinearGridForecaster, TrainConfig};
    use crate::imts_data::{grid_dataset, GridSpec};
    use crate::shiftgen::{Regime, ShiftScenario};
    use crate::uncertainty::{pretrain, UePretrainConfig};

    fn scenario(seed: u64) -> ShiftScenario {
        ShiftScenario {
            n_vars: 2,
            n_samples: 220,
            grid: GridSpec { l_in: 6, l_out: 3, window_start: 0.0, window_end: 9.0 },
            regimes: vec![
                Regime {
                    start_frac: 0.0,
                    mean_offset: vec![0.0],
                    ar_coeff: 0.6,
                    noise_scale: 1.0,
                    missing_rate: 0.2,
                },
                Regime {
                    start_frac: 0.6,
                    mean_offset: vec![2.0],
                    ar_coeff: 0.6,
                    noise_scale: 1.0,
                    missing_rate: 0.55,
                },
            ],
            seed,
        }
    }

    struct Fixture {
        f: LinearGridForecaster,
        ue: UncertaintyEstimator,
        online: Vec<GriddedExample>,
    }

    fn fixture(seed: u64) -> Fixture {
        let sc = scenario(seed);
        let samples: Vec<_> = sc.iter().collect();
        let all = grid_dataset(&samples, &sc.grid).unwrap();
        let (train, rest) = all.split_at(44);
        let (valid, online) = rest.split_at(11);

        let mut f = LinearGridForecaster::new(crate::forecaster::GridDims {
            l_in: 6,
            l_out: 3,
            n_vars: 2,
        });
        let tc = TrainConfig { max_epochs: 60, ..TrainConfig::default() };
        train_offline(&mut f, train, valid, &tc).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut ue = UncertaintyEstimator::new(f.dims(), &mut rng);
        let uc = UePretrainConfig { max_epochs: 40, ..UePretrainConfig::default() };
        pretrain(&mut ue, &f, train, valid, &uc).unwrap();

        Fixture { f, ue, online: online.to_vec() }
    }

    fn base_cfg() -> EngineConfig {
        EngineConfig { batch_size: 16, ..EngineConfig::default() }
    }

    #[test]
    fn first_batch_predictions_equal_raw_forecasts() {
        let fx = fixture(1);
        let mut engine = Engine::new(&fx.f, Some(fx.ue.clone()), base_cfg()).unwrap();
        let batch = &fx.online[..16];
        let out = engine.process_batch(batch).unwrap();
        assert!(out.triggered, "first batch must trigger");
        for (ex, pred) in batch.iter().zip(&out.predictions) {
            let raw = fx.f.predict(&ex.lookback, &ex.query).unwrap();
            assert_eq!(*pred, raw, "fresh experts are identities");
        }
        assert_eq!(out.scores.len(), 16);
        assert!(out.tau_trig.is_nan(), "no previous trigger stats");
    }

    #[test]
    fn replaying_a_stream_is_bit_identical() {
        let fx = fixture(2);
        let run = || run_stream(&fx.f, Some(fx.ue.clone()), &fx.online, &base_cfg()).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.outcomes.len(), b.outcomes.len());
        for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
            assert_eq!(x.predictions, y.predictions);
            assert_eq!(x.scores, y.scores);
            assert_eq!(x.mse.to_bits(), y.mse.to_bits());
            assert_eq!(x.triggered, y.triggered);
        }
    }

    #[test]
    fn forecaster_is_frozen_across_all_modes() {
        let fx = fixture(3);
        for mode in Mode::all() {
            let cfg = EngineConfig { mode, ..base_cfg() };
            let report =
                run_stream(&fx.f, Some(fx.ue.clone()), &fx.online[..64], &cfg).unwrap();
            assert!(report.forecaster_unchanged, "mode {}", mode.as_str());
        }
    }

    #[test]
    fn aggregate_matches_weighted_batch_mean() {
        let fx = fixture(4);
        let report = run_stream(&fx.f, Some(fx.ue.clone()), &fx.online, &base_cfg()).unwrap();
        let mut sq = 0.0;
        let mut n = 0.0;
        for o in &report.outcomes {
            if o.n_obs > 0 {
                sq += o.mse * o.n_obs as f64;
                n += o.n_obs as f64;
            }
        }
        assert!((report.mse - sq / n).abs() < 1e-9);
    }

    #[test]
    fn forced_high_threshold_matches_single_expert_joint() {
        // With the allocation threshold pushed above any score, full mode
        // routes everything reliable and must replay single-expert-joint
        // exactly, leaving the unreliable expert at init.
        let fx = fixture(5);
        let stream = &fx.online[..96];
        let full_cfg = EngineConfig { kappa_alloc: 1e6, ..base_cfg() };
        let joint_cfg =
            EngineConfig { mode: Mode::SingleExpertJoint, ..base_cfg() };
        let full = run_stream(&fx.f, Some(fx.ue.clone()), stream, &full_cfg).unwrap();
        let joint = run_stream(&fx.f, Some(fx.ue.clone()), stream, &joint_cfg).unwrap();
        for (a, b) in full.outcomes.iter().zip(&joint.outcomes) {
            assert_eq!(a.predictions, b.predictions);
            assert_eq!(a.triggered, b.triggered);
            assert!(a.unreliable_idx.is_empty());
        }

        // And the unreliable expert of the full run never moved.
        let mut engine = Engine::new(&fx.f, Some(fx.ue.clone()), full_cfg.clone()).unwrap();
        let init_sum = checksum(&engine.unreliable);
        for batch in stream.chunks(full_cfg.batch_size) {
            engine.process_batch(batch).unwrap();
        }
        assert_eq!(checksum(&engine.unreliable), init_sum);
    }

    #[test]
    fn zero_probability_random_triggering_equals_frozen() {
        let fx = fixture(6);
        let stream = &fx.online[..80];
        let never = EngineConfig {
            mode: Mode::RandomTriggering,
            random_trigger_p: 0.0,
            ..base_cfg()
        };
        let frozen = EngineConfig { mode: Mode::Frozen, ..base_cfg() };
        let a = run_stream(&fx.f, Some(fx.ue.clone()), stream, &never).unwrap();
        let b = run_stream(&fx.f, Some(fx.ue.clone()), stream, &frozen).unwrap();
        assert_eq!(a.update_frequency, 0.0);
        for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
            assert_eq!(x.predictions, y.predictions);
            assert_eq!(x.mse.to_bits(), y.mse.to_bits());
        }
    }

    #[test]
    fn no_ue_mode_adapts_every_batch_without_scores() {
        let fx = fixture(7);
        let cfg = EngineConfig { mode: Mode::NoUeSingleJoint, ..base_cfg() };
        let report = run_stream(&fx.f, None, &fx.online[..80], &cfg).unwrap();
        assert_eq!(report.update_frequency, 1.0);
        for o in &report.outcomes {
            assert!(o.scores.is_empty());
            assert!(o.mean_uncertainty.is_nan());
            assert_eq!(o.reliable_idx.len(), o.n_samples);
        }
    }

    #[test]
    fn modes_needing_ue_reject_its_absence() {
        let fx = fixture(8);
        let err = Engine::new(&fx.f, None, base_cfg()).err().unwrap();
        assert!(err.to_string().contains("uncertainty"), "{err}");
    }

    #[test]
    fn single_reliable_mode_bypasses_unreliable_samples() {
        let fx = fixture(9);
        let cfg = EngineConfig { mode: Mode::SingleExpertReliable, ..base_cfg() };
        let mut engine = Engine::new(&fx.f, Some(fx.ue.clone()), cfg.clone()).unwrap();
        let unrel_init = checksum(&engine.unreliable);
        let mut saw_unreliable = false;
        for batch in fx.online.chunks(cfg.batch_size) {
            let out = engine.process_batch(batch).unwrap();
            for &i in &out.unreliable_idx {
                saw_unreliable = true;
                let raw = fx.f.predict(&batch[i].lookback, &batch[i].query).unwrap();
                assert_eq!(out.predictions[i], raw, "bypass must be the raw forecast");
            }
        }
        assert!(saw_unreliable, "stream never produced an unreliable sample");
        assert_eq!(checksum(&engine.unreliable), unrel_init);
    }

    #[test]
    fn adaptation_reduces_error_after_a_shift() {
        // Default rates are tuned for long streams; this short one needs
        // livelier experts to show the effect.
        let fx = fixture(10);
        let cfg = EngineConfig { lr_reliable: 0.05, lr_unreliable: 0.05, ..base_cfg() };
        let full = run_stream(&fx.f, Some(fx.ue.clone()), &fx.online, &cfg).unwrap();
        let frozen_cfg = EngineConfig { mode: Mode::Frozen, ..base_cfg() };
        let frozen = run_stream(&fx.f, Some(fx.ue.clone()), &fx.online, &frozen_cfg).unwrap();
        assert!(
            full.mse < frozen.mse,
            "adaptation must beat frozen: {} vs {}",
            full.mse,
            frozen.mse
        );
    }

    #[test]
    fn causality_audit_passes_and_detects_the_leak() {
        let fx = fixture(11);
        let report =
            causality_audit(&fx.f, &fx.ue, &fx.online[..112], &base_cfg(), 3).unwrap();
        assert!(report.prefix_identical, "{report:?}");
        assert!(report.metrics_precede_updates, "{report:?}");
        assert!(report.leak_detected, "{report:?}");
        assert!(report.forecaster_frozen, "{report:?}");
        assert!(report.passed());
    }

    #[test]
    fn noise_probe_with_zero_variance_changes_nothing() {
        let fx = fixture(12);
        let noise = NoiseSpec { variance: 0.0, start_batch: 2, n_batches: 1, seed: 7 };
        let probe =
            ue_noise_probe(&fx.f, &fx.ue, &fx.online[..96], &base_cfg(), noise).unwrap();
        for (c, n, _) in &probe.per_batch {
            assert_eq!(c.to_bits(), n.to_bits());
        }
    }

    #[test]
    fn noisy_scores_stay_clamped() {
        let fx = fixture(13);
        let cfg = EngineConfig {
            noise: Some(NoiseSpec { variance: 0.5, start_batch: 0, n_batches: 100, seed: 3 }),
            ..base_cfg()
        };
        let report = run_stream(&fx.f, Some(fx.ue.clone()), &fx.online[..96], &cfg).unwrap();
        for o in &report.outcomes {
            for &u in &o.scores {
                assert!((0.0..=1.0).contains(&u));
            }
        }
    }

    #[test]
    fn random_allocating_partition_ignores_scores() {
        let fx = fixture(14);
        let cfg = EngineConfig { mode: Mode::RandomAllocating, seed: 5, ..base_cfg() };
        let report = run_stream(&fx.f, Some(fx.ue.clone()), &fx.online[..96], &cfg).unwrap();
        // Coin-flip allocation: both sides populated over the run, and the
        // split is not the threshold split.
        let rel: usize = report.outcomes.iter().map(|o| o.reliable_idx.len()).sum();
        let unrel: usize = report.outcomes.iter().map(|o| o.unreliable_idx.len()).sum();
        assert!(rel > 10 && unrel > 10, "rel {rel} unrel {unrel}");
        let mismatched = report.outcomes.iter().any(|o| {
            o.reliable_idx.iter().any(|&i| o.scores[i] >= o.tau_alloc)
                || o.unreliable_idx.iter().any(|&i| o.scores[i] < o.tau_alloc)
        });
        assert!(mismatched, "random allocation reproduced the threshold split exactly");
    }

    #[test]
    fn empty_unreliable_set_leaves_unreliable_expert_alone() {
        let fx = fixture(15);
        let cfg = EngineConfig { kappa_alloc: 1e9, mode: Mode::Full, ..base_cfg() };
        let mut engine = Engine::new(&fx.f, Some(fx.ue.clone()), cfg).unwrap();
        let before = checksum(&engine.unreliable);
        let out = engine.process_batch(&fx.online[..16]).unwrap();
        assert!(out.unreliable_idx.is_empty());
        assert_eq!(checksum(&engine.unreliable), before);
    }
}
