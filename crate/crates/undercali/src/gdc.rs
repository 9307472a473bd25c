//! Dual-expert gated calibration around the frozen forecaster.
//!
//! A calibrator block applies a residual, gated correction to an L x C value
//! matrix: per-variable temporal mixing, a row-wise MLP across variables,
//! and a per-variable tanh gate. At construction the correction path is
//! exactly zero, so a fresh block is a bitwise identity. An expert owns one
//! input-side block and one output-side block and adapts both by
//! backpropagating through the forecaster's input sensitivity, without ever
//! touching the forecaster's parameters.

use rand::Rng;

use crate::diffkit::{
    adam_step, load_checkpoint, save_checkpoint, zero_grads, Activation, Mlp, MlpTrace, Param,
    ParamSet,
};
use crate::error::{Error, Result};
use crate::forecaster::{GridDims, SourceForecaster};
use crate::imts_data::{GriddedExample, GriddedWindow};
use crate::mat::Mat;

/// Initial gate pre-activation; small so the gate opens gently once the MLP
/// path trains away from zero.
pub const GATE_INIT: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct CalibratorBlock {
    pub window_len: usize,
    pub n_vars: usize,
    /// Per-variable temporal mixing, one L x L matrix each.
    pub temporal_w: Vec<Param>,
    /// Per-variable temporal bias, L x 1 each.
    pub temporal_b: Vec<Param>,
    /// Row-wise across-variable map, C -> 2C tanh -> C linear.
    pub mlp: Mlp,
    /// Gate pre-activations, 1 x C.
    pub gate: Param,
    name: String,
}

/// Everything `backward` needs from one forward pass.
#[derive(Clone, Debug)]
pub struct CalTrace {
    v: Mat,
    mlp_trace: MlpTrace,
    /// tanh of the gate, per variable.
    g: Vec<f64>,
}

impl CalibratorBlock {
    /// Zero-initialized correction path: temporal weights and biases zero,
    /// MLP final layer (weights and bias) zero, gate pre-activation 0.01.
    /// The MLP hidden layer gets a seeded Xavier draw so the block has
    /// somewhere to go once gradients arrive.
    pub fn new(name: &str, window_len: usize, n_vars: usize, rng: &mut impl Rng) -> Self {
        let temporal_w = (0..n_vars).map(|_| Param::zeros(window_len, window_len)).collect();
        let temporal_b = (0..n_vars).map(|_| Param::zeros(window_len, 1)).collect();
        let mut mlp = Mlp::xavier(
            &format!("{name}.mlp"),
            &[n_vars, 2 * n_vars, n_vars],
            &[Activation::Tanh, Activation::Linear],
            rng,
        );
        let last = mlp.layers.last_mut().expect("two layers by construction");
        last.w.value.fill(0.0);
        last.b.value.fill(0.0);
        let gate = Param::new(Mat::filled(1, n_vars, GATE_INIT));
        CalibratorBlock {
            window_len,
            n_vars,
            temporal_w,
            temporal_b,
            mlp,
            gate,
            name: name.to_string(),
        }
    }

    /// Residual gated correction: `V + tile(tanh(gate)) * MLP(H)` where
    /// column c of H is `W_c V[:,c] + b_c`.
    pub fn calibrate(&self, v: &Mat) -> Result<(Mat, CalTrace)> {
        v.require_shape(self.window_len, self.n_vars, &format!("{} input", self.name))?;
        let mut h = Mat::zeros(self.window_len, self.n_vars);
        for c in 0..self.n_vars {
            let col = v.col(c);
            let mixed = self.temporal_w[c].value.matvec(&col);
            for (l, x) in mixed.into_iter().enumerate() {
                h.set(l, c, x + self.temporal_b[c].value.get(l, 0));
            }
        }
        let mlp_trace = self.mlp.trace(&h)?;
        let g: Vec<f64> = (0..self.n_vars).map(|c| self.gate.value.get(0, c).tanh()).collect();
        let m = mlp_trace.output();
        let mut out = v.clone();
        for l in 0..self.window_len {
            for c in 0..self.n_vars {
                out.add_at(l, c, g[c] * m.get(l, c));
            }
        }
        Ok((out, CalTrace { v: v.clone(), mlp_trace, g }))
    }

    pub fn forward(&self, v: &Mat) -> Result<Mat> {
        Ok(self.calibrate(v)?.0)
    }

    /// Accumulate parameter gradients for `dL/d(output) = upstream`; returns
    /// `dL/d(input)`.
    pub fn backward(&mut self, trace: &CalTrace, upstream: &Mat) -> Result<Mat> {
        upstream.require_shape(self.window_len, self.n_vars, &format!("{} upstream", self.name))?;
        let m = trace.mlp_trace.output();
        // Gate: d/d gate_c = sum_l U[l][c] M[l][c] (1 - g_c^2).
        for c in 0..self.n_vars {
            let gc = trace.g[c];
            let mut acc = 0.0;
            for l in 0..self.window_len {
                acc += upstream.get(l, c) * m.get(l, c);
            }
            self.gate.grad.add_at(0, c, acc * (1.0 - gc * gc));
        }
        // Into the MLP: dL/dM[l][c] = U[l][c] g_c.
        let mut d_m = upstream.clone();
        for l in 0..self.window_len {
            for c in 0..self.n_vars {
                d_m.set(l, c, d_m.get(l, c) * trace.g[c]);
            }
        }
        let d_h = self.mlp.backward(&trace.mlp_trace, &d_m)?;
        // Temporal maps and the two paths into the input.
        let mut d_v = upstream.clone();
        for c in 0..self.n_vars {
            let dh_c = d_h.col(c);
            let v_c = trace.v.col(c);
            for i in 0..self.window_len {
                for j in 0..self.window_len {
                    self.temporal_w[c].grad.add_at(i, j, dh_c[i] * v_c[j]);
                }
                self.temporal_b[c].grad.add_at(i, 0, dh_c[i]);
            }
            let back = self.temporal_w[c].value.matvec_t(&dh_c);
            for l in 0..self.window_len {
                d_v.add_at(l, c, back[l]);
            }
        }
        Ok(d_v)
    }
}

impl ParamSet for CalibratorBlock {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param)) {
        for c in 0..self.n_vars {
            f(&format!("{}.w{c}", self.name), &self.temporal_w[c]);
            f(&format!("{}.b{c}", self.name), &self.temporal_b[c]);
        }
        self.mlp.for_each_param(f);
        f(&format!("{}.gate", self.name), &self.gate);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for c in 0..self.n_vars {
            f(&format!("{}.w{c}", self.name), &mut self.temporal_w[c]);
            f(&format!("{}.b{c}", self.name), &mut self.temporal_b[c]);
        }
        self.mlp.for_each_param_mut(f);
        f(&format!("{}.gate", self.name), &mut self.gate);
    }
}

/// Whether adaptation backpropagates through the forecaster into the
/// input-side calibrator, or leaves that block untrained (for forecasters
/// that cannot expose input sensitivities).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputCali {
    FullGrad,
    Frozen,
}

/// Loss normalization: the raw masked squared norm per sample, or that norm
/// divided by the sample's observed-cell count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossNorm {
    Raw,
    PerObs,
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub input_cali: CalibratorBlock,
    pub output_cali: CalibratorBlock,
    pub lr: f64,
    name: String,
}

impl Expert {
    pub fn new(name: &str, dims: GridDims, lr: f64, rng: &mut impl Rng) -> Self {
        Expert {
            input_cali: CalibratorBlock::new(&format!("{name}.in"), dims.l_in, dims.n_vars, rng),
            output_cali: CalibratorBlock::new(&format!("{name}.out"), dims.l_out, dims.n_vars, rng),
            lr,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Calibrated prediction: input calibration on lookback values (mask and
    /// times untouched), frozen forecast, output calibration.
    pub fn forward(
        &self,
        f: &dyn SourceForecaster,
        lookback: &GriddedWindow,
        query: &GriddedWindow,
    ) -> Result<Mat> {
        let v_cal = self.input_cali.forward(&lookback.values)?;
        let cal_window = GriddedWindow {
            values: v_cal,
            mask: lookback.mask.clone(),
            slot_times: lookback.slot_times.clone(),
        };
        let pred = f.predict(&cal_window, query)?;
        self.output_cali.forward(&pred)
    }
}

impl ParamSet for Expert {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.input_cali.for_each_param(f);
        self.output_cali.for_each_param(f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.input_cali.for_each_param_mut(f);
        self.output_cali.for_each_param_mut(f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptOptions {
    pub n_steps: usize,
    pub loss_norm: LossNorm,
    pub input_cali: InputCali,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions { n_steps: 5, loss_norm: LossNorm::PerObs, input_cali: InputCali::FullGrad }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptReport {
    /// Loss at each step, measured before that step's update.
    pub step_losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    /// True if a non-finite loss or gradient stopped adaptation early; the
    /// parameters are those from before the offending step.
    pub aborted: bool,
}

/// Mean adaptation loss of `e` over `batch`. Samples with no observed target
/// cell contribute nothing and do not count toward the mean.
pub fn batch_loss(
    e: &Expert,
    f: &dyn SourceForecaster,
    batch: &[&GriddedExample],
    norm: LossNorm,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invariant("empty adaptation subset".into()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for ex in batch {
        let n_obs = ex.target.observed_count();
        if n_obs == 0 {
            continue;
        }
        let pred = e.forward(f, &ex.lookback, &ex.query)?;
        let mut sq = 0.0;
        for ((p, t), m) in pred
            .as_slice()
            .iter()
            .zip(ex.target.values.as_slice())
            .zip(ex.target.mask.as_slice())
        {
            let d = (p - t) * m;
            sq += d * d;
        }
        acc += match norm {
            LossNorm::Raw => sq,
            LossNorm::PerObs => sq / n_obs as f64,
        };
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(acc / n as f64)
}

/// One full forward/backward over the batch, accumulating gradients into
/// `e`. Returns the loss.
pub fn accumulate_grads(
    e: &mut Expert,
    f: &dyn SourceForecaster,
    batch: &[&GriddedExample],
    opts: &AdaptOptions,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invariant("empty adaptation subset".into()));
    }
    let contributing =
        batch.iter().filter(|ex| ex.target.observed_count() > 0).count();
    if contributing == 0 {
        return Err(Error::EmptyTarget);
    }
    let inv = 1.0 / contributing as f64;
    let mut acc = 0.0;
    for ex in batch {
        let n_obs = ex.target.observed_count();
        if n_obs == 0 {
            continue;
        }
        let (v_cal, in_trace) = e.input_cali.calibrate(&ex.lookback.values)?;
        let cal_window = GriddedWindow {
            values: v_cal,
            mask: ex.lookback.mask.clone(),
            slot_times: ex.lookback.slot_times.clone(),
        };
        let pred = f.predict(&cal_window, &ex.query)?;
        let (out, out_trace) = e.output_cali.calibrate(&pred)?;

        let scale = match opts.loss_norm {
            LossNorm::Raw => inv,
            LossNorm::PerObs => inv / n_obs as f64,
        };
        let mut sq = 0.0;
        let mut upstream = Mat::zeros(out.rows(), out.cols());
        for i in 0..out.len() {
            let m = ex.target.mask.as_slice()[i];
            let d = (out.as_slice()[i] - ex.target.values.as_slice()[i]) * m;
            sq += d * d;
            upstream.as_mut_slice()[i] = 2.0 * d * m * scale;
        }
        acc += match opts.loss_norm {
            LossNorm::Raw => sq,
            LossNorm::PerObs => sq / n_obs as f64,
        };

        let d_pred = e.output_cali.backward(&out_trace, &upstream)?;
        if opts.input_cali == InputCali::FullGrad {
            let d_v_cal = f.input_vjp(&cal_window, &ex.query, &d_pred)?;
            e.input_cali.backward(&in_trace, &d_v_cal)?;
        }
    }
    Ok(acc * inv)
}

/// Adapt the expert on a fixed batch: `n_steps` full-batch Adam updates at
/// the expert's learning rate. The forecaster participates in backprop only
/// as a differentiable map; its parameters are never written. A non-finite
/// loss or gradient aborts before the offending update, keeping the
/// parameters from the last clean step.
pub fn expert_adapt(
    e: &mut Expert,
    f: &dyn SourceForecaster,
    batch: &[&GriddedExample],
    opts: &AdaptOptions,
) -> Result<AdaptReport> {
    let mut step_losses = Vec::with_capacity(opts.n_steps);
    let mut aborted = false;
    for _ in 0..opts.n_steps {
        let loss = accumulate_grads(e, f, batch, opts)?;
        if !loss.is_finite() {
            zero_grads(e);
            aborted = true;
            break;
        }
        step_losses.push(loss);
        if adam_step(e, e.lr).is_err() {
            zero_grads(e);
            aborted = true;
            break;
        }
    }
    let final_loss = batch_loss(e, f, batch, opts.loss_norm)?;
    Ok(AdaptReport { step_losses, final_loss, aborted })
}

pub fn save_expert(path: &std::path::Path, e: &Expert, role: &str, dims: GridDims) -> Result<()> {
    let meta = serde_json::json!({
        "role": role,
        "l_in": dims.l_in,
        "l_out": dims.l_out,
        "n_vars": dims.n_vars,
        "lr": e.lr,
    });
    save_checkpoint(path, "expert", meta, e)
}

pub fn load_expert(path: &std::path::Path, expect_role: &str) -> Result<Expert> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "expert" {
        return Err(Error::Checkpoint(format!(
            "expected an expert checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let role = ckpt.meta_str("role")?;
    if role != expect_role {
        return Err(Error::Checkpoint(format!(
            "checkpoint role {role:?} does not match expected {expect_role:?}"
        )));
    }
    let dims = GridDims {
        l_in: ckpt.meta_u64("l_in")? as usize,
        l_out: ckpt.meta_u64("l_out")? as usize,
        n_vars: ckpt.meta_u64("n_vars")? as usize,
    };
    let lr = ckpt.meta_f64("lr")?;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut e = Expert::new(expect_role, dims, lr, &mut rng);
    ckpt.restore(&mut e)?;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{checksum, grad_check};
    use crate::forecaster::{LinearGridForecaster, LocfForecaster};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> GridDims {
        GridDims { l_in: 3, l_out: 2, n_vars: 2 }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for x in m.as_mut_slice() {
            *x = rng.random_range(-2.0..2.0);
        }
        m
    }

    fn scramble(block: &mut CalibratorBlock, rng: &mut ChaCha8Rng) {
        block.for_each_param_mut(&mut |_, p| {
            for x in p.value.as_mut_slice() {
                *x = rng.random_range(-0.5..0.5);
            }
        });
    }

    #[test]
    fn fresh_block_is_exact_identity() {
        let mut r = rng(1);
        let block = CalibratorBlock::new("cal", 4, 3, &mut r);
        for _ in 0..1000 {
            let v = random_mat(4, 3, &mut r);
            let out = block.forward(&v).unwrap();
            let worst = out
                .as_slice()
                .iter()
                .zip(v.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert_eq!(worst, 0.0);
        }
    }

    #[test]
    fn saturated_gate_adds_full_correction() {
        let mut r = rng(2);
        let mut block = CalibratorBlock::new("cal", 3, 2, &mut r);
        scramble(&mut block, &mut r);
        let v = random_mat(3, 2, &mut r);
        let gates: Vec<f64> = (0..2).map(|c| block.gate.value.get(0, c).tanh()).collect();
        let with_gate = block.forward(&v).unwrap();

        block.gate.value.fill(50.0); // tanh rounds to exactly 1
        let saturated = block.forward(&v).unwrap();
        // Ungating the first output must recover the full correction.
        for c in 0..2 {
            for l in 0..3 {
                let corr = (with_gate.get(l, c) - v.get(l, c)) / gates[c];
                let sat = saturated.get(l, c) - v.get(l, c);
                assert!((corr - sat).abs() < 1e-9, "({l},{c}): {corr} vs {sat}");
            }
        }
    }

    #[test]
    fn calibrate_matches_straight_line_recomputation() {
        let mut r = rng(3);
        let mut block = CalibratorBlock::new("cal", 4, 3, &mut r);
        scramble(&mut block, &mut r);
        let v = random_mat(4, 3, &mut r);
        let out = block.forward(&v).unwrap();

        // Independent oracle, no shared code with calibrate().
        let (l_len, c_len) = (4usize, 3usize);
        let mut h = vec![vec![0.0; c_len]; l_len];
        for c in 0..c_len {
            for i in 0..l_len {
                let mut acc = block.temporal_b[c].value.get(i, 0);
                for j in 0..l_len {
                    acc += block.temporal_w[c].value.get(i, j) * v.get(j, c);
                }
                h[i][c] = acc;
            }
        }
        let w1 = &block.mlp.layers[0].w.value;
        let b1 = &block.mlp.layers[0].b.value;
        let w2 = &block.mlp.layers[1].w.value;
        let b2 = &block.mlp.layers[1].b.value;
        for l in 0..l_len {
            let hidden: Vec<f64> = (0..2 * c_len)
                .map(|k| {
                    let mut z = b1.get(0, k);
                    for c in 0..c_len {
                        z += h[l][c] * w1.get(c, k);
                    }
                    z.tanh()
                })
                .collect();
            for c in 0..c_len {
                let mut m = b2.get(0, c);
                for (k, hk) in hidden.iter().enumerate() {
                    m += hk * w2.get(k, c);
                }
                let expect = v.get(l, c) + block.gate.value.get(0, c).tanh() * m;
                assert!(
                    (out.get(l, c) - expect).abs() < 1e-12,
                    "({l},{c}): {} vs {expect}",
                    out.get(l, c)
                );
            }
        }
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let mut r = rng(4);
        let mut block = CalibratorBlock::new("cal", 3, 2, &mut r);
        scramble(&mut block, &mut r);
        let v = random_mat(3, 2, &mut r);
        let weights = random_mat(3, 2, &mut r);
        // Loss: weighted sum of outputs.
        let (_, trace) = block.calibrate(&v).unwrap();
        zero_grads(&mut block);
        block.backward(&trace, &weights).unwrap();
        let report = grad_check(&mut block, |b: &CalibratorBlock| {
            let out = b.forward(&v)?;
            Ok(out.as_slice().iter().zip(weights.as_slice()).map(|(o, w)| o * w).sum())
        })
        .unwrap();
        assert!(report.worst_rel < 1e-6, "{report:?}");
    }

    #[test]
    fn block_input_gradient_matches_finite_differences() {
        let mut r = rng(5);
        let mut block = CalibratorBlock::new("cal", 3, 2, &mut r);
        scramble(&mut block, &mut r);
        let v = random_mat(3, 2, &mut r);
        let weights = random_mat(3, 2, &mut r);
        let (_, trace) = block.calibrate(&v).unwrap();
        let dv = block.backward(&trace, &weights).unwrap();
        let h = 1e-6;
        for i in 0..v.len() {
            let mut vp = v.clone();
            vp.as_mut_slice()[i] += h;
            let mut vm = v.clone();
            vm.as_mut_slice()[i] -= h;
            let s = |x: &Mat| {
                block
                    .forward(x)
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(weights.as_slice())
                    .map(|(o, w)| o * w)
                    .sum::<f64>()
            };
            let num = (s(&vp) - s(&vm)) / (2.0 * h);
            assert!((dv.as_slice()[i] - num).abs() < 1e-6);
        }
    }

    fn example(seed: u64) -> GriddedExample {
        let mut r = rng(seed);
        let d = dims();
        let mk_mask = |rows: usize, r: &mut ChaCha8Rng| {
            let mut m = Mat::zeros(rows, d.n_vars);
            loop {
                for x in m.as_mut_slice() {
                    *x = if r.random::<f64>() < 0.75 { 1.0 } else { 0.0 };
                }
                if m.as_slice().iter().any(|&x| x == 1.0) {
                    return m;
                }
            }
        };
        let lmask = mk_mask(d.l_in, &mut r);
        let lvals = random_mat(d.l_in, d.n_vars, &mut r).hadamard(&lmask);
        let tmask = mk_mask(d.l_out, &mut r);
        let tvals = random_mat(d.l_out, d.n_vars, &mut r).hadamard(&tmask);
        let lt: Vec<f64> = (0..d.l_in).map(|i| i as f64).collect();
        let qt: Vec<f64> = (0..d.l_out).map(|i| 10.0 + i as f64).collect();
        GriddedExample {
            lookback: GriddedWindow { values: lvals, mask: lmask, slot_times: lt },
            query: GriddedWindow {
                values: Mat::zeros(d.l_out, d.n_vars),
                mask: tmask.clone(),
                slot_times: qt.clone(),
            },
            target: GriddedWindow { values: tvals, mask: tmask, slot_times: qt },
        }
    }

    fn trained_forecaster(seed: u64) -> LinearGridForecaster {
        let mut f = LinearGridForecaster::new(dims());
        let mut r = rng(seed);
        f.for_each_param_mut(&mut |_, p| {
            for x in p.value.as_mut_slice() {
                *x = r.random_range(-0.6..0.6);
            }
        });
        f
    }

    #[test]
    fn fresh_expert_reproduces_raw_prediction() {
        let mut r = rng(7);
        let e = Expert::new("rel", dims(), 1e-3, &mut r);
        let f = trained_forecaster(8);
        let ex = example(9);
        let raw = f.predict(&ex.lookback, &ex.query).unwrap();
        let cal = e.forward(&f, &ex.lookback, &ex.query).unwrap();
        assert_eq!(raw, cal);
    }

    #[test]
    fn zero_forecaster_stays_zero_through_fresh_expert() {
        let mut r = rng(10);
        let e = Expert::new("rel", dims(), 1e-3, &mut r);
        let f = LinearGridForecaster::new(dims()); // zero map
        let ex = example(11);
        let cal = e.forward(&f, &ex.lookback, &ex.query).unwrap();
        assert!(cal.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn expert_forward_matches_hand_composition() {
        let mut r = rng(12);
        let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
        scramble(&mut e.input_cali, &mut r);
        scramble(&mut e.output_cali, &mut r);
        let f = trained_forecaster(13);
        let ex = example(14);

        let composed = e.forward(&f, &ex.lookback, &ex.query).unwrap();
        let step1 = e.input_cali.forward(&ex.lookback.values).unwrap();
        let step2 = f
            .predict(
                &GriddedWindow {
                    values: step1,
                    mask: ex.lookback.mask.clone(),
                    slot_times: ex.lookback.slot_times.clone(),
                },
                &ex.query,
            )
            .unwrap();
        let step3 = e.output_cali.forward(&step2).unwrap();
        for i in 0..composed.len() {
            assert!((composed.as_slice()[i] - step3.as_slice()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn expert_forward_leaves_inputs_untouched() {
        let mut r = rng(15);
        let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
        scramble(&mut e.input_cali, &mut r);
        let f = trained_forecaster(16);
        let ex = example(17);
        let lb_before = ex.lookback.clone();
        let q_before = ex.query.clone();
        e.forward(&f, &ex.lookback, &ex.query).unwrap();
        assert_eq!(ex.lookback, lb_before);
        assert_eq!(ex.query, q_before);
    }

    #[test]
    fn full_expert_gradient_is_exact() {
        let mut r = rng(18);
        let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
        scramble(&mut e.input_cali, &mut r);
        scramble(&mut e.output_cali, &mut r);
        let f = trained_forecaster(19);
        let exs = [example(20), example(21), example(22)];
        let batch: Vec<&GriddedExample> = exs.iter().collect();
        let opts = AdaptOptions::default();

        zero_grads(&mut e);
        accumulate_grads(&mut e, &f, &batch, &opts).unwrap();
        let report = grad_check(&mut e, |e: &Expert| batch_loss(e, &f, &batch, opts.loss_norm))
            .unwrap();
        assert!(report.worst_rel < 1e-5, "{report:?}");

        // Same check with the raw-norm loss.
        let opts_raw =
            AdaptOptions { loss_norm: LossNorm::Raw, ..AdaptOptions::default() };
        zero_grads(&mut e);
        accumulate_grads(&mut e, &f, &batch, &opts_raw).unwrap();
        let report =
            grad_check(&mut e, |e: &Expert| batch_loss(e, &f, &batch, LossNorm::Raw)).unwrap();
        assert!(report.worst_rel < 1e-5, "{report:?}");
    }

    #[test]
    fn adapting_one_expert_leaves_the_other_and_f_untouched() {
        let mut r = rng(23);
        let mut rel = Expert::new("rel", dims(), 1e-3, &mut r);
        let unrel = Expert::new("unrel", dims(), 1e-4, &mut r);
        let f = trained_forecaster(24);
        let exs = [example(25), example(26)];
        let batch: Vec<&GriddedExample> = exs.iter().collect();

        let f_sum_before = f.param_checksum();
        let unrel_sum_before = checksum(&unrel);
        let rel_sum_before = checksum(&rel);
        expert_adapt(&mut rel, &f, &batch, &AdaptOptions::default()).unwrap();
        assert_eq!(f.param_checksum(), f_sum_before);
        assert_eq!(checksum(&unrel), unrel_sum_before);
        assert_ne!(checksum(&rel), rel_sum_before, "adaptation must move the expert");
    }

    #[test]
    fn adapt_reduces_loss_on_fixed_batch() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
            let f = trained_forecaster(200 + seed);
            let exs = [example(300 + seed), example(400 + seed), example(500 + seed)];
            let batch: Vec<&GriddedExample> = exs.iter().collect();
            let report = expert_adapt(&mut e, &f, &batch, &AdaptOptions::default()).unwrap();
            assert!(!report.aborted);
            assert_eq!(report.step_losses.len(), 5);
            let mut seq = report.step_losses.clone();
            seq.push(report.final_loss);
            let non_increasing =
                seq.windows(2).filter(|w| w[1] <= w[0] + 1e-15).count();
            assert!(
                non_increasing >= 4,
                "seed {seed}: only {non_increasing}/5 non-increasing: {seq:?}"
            );
            assert!(report.final_loss < report.step_losses[0]);
        }
    }

    #[test]
    fn perfect_targets_give_zero_loss_and_no_movement() {
        let mut r = rng(30);
        let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
        let f = trained_forecaster(31);
        let mut ex = example(32);
        let pred = e.forward(&f, &ex.lookback, &ex.query).unwrap();
        ex.target.values = pred.hadamard(&ex.target.mask);
        let before = checksum(&e);
        let batch = [&ex];
        let report = expert_adapt(&mut e, &f, &batch, &AdaptOptions::default()).unwrap();
        assert_eq!(report.final_loss, 0.0);
        assert_eq!(checksum(&e), before);
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let mut r = rng(33);
        let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
        let f = trained_forecaster(34);
        let ex = example(35);
        let before = checksum(&e);
        let opts = AdaptOptions { n_steps: 0, ..AdaptOptions::default() };
        let report = expert_adapt(&mut e, &f, &[&ex], &opts).unwrap();
        assert!(report.step_losses.is_empty());
        assert_eq!(checksum(&e), before);
    }

    #[test]
    fn empty_subset_is_an_error() {
        let mut r = rng(36);
        let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
        let f = trained_forecaster(37);
        assert!(expert_adapt(&mut e, &f, &[], &AdaptOptions::default()).is_err());
    }

    #[test]
    fn non_finite_target_aborts_without_moving_parameters() {
        let mut r = rng(38);
        let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
        let f = trained_forecaster(39);
        let mut ex = example(40);
        ex.target.values.set(0, 0, f64::INFINITY);
        ex.target.mask.set(0, 0, 1.0);
        let before = checksum(&e);
        let report = expert_adapt(&mut e, &f, &[&ex], &AdaptOptions::default());
        match report {
            Ok(rep) => assert!(rep.aborted),
            Err(_) => {}
        }
        assert_eq!(checksum(&e), before);
    }

    #[test]
    fn frozen_input_mode_never_trains_the_input_block() {
        let mut r = rng(41);
        let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
        let f = trained_forecaster(42);
        let exs = [example(43), example(44)];
        let batch: Vec<&GriddedExample> = exs.iter().collect();
        let in_before = checksum(&e.input_cali);
        let opts = AdaptOptions { input_cali: InputCali::Frozen, ..AdaptOptions::default() };
        expert_adapt(&mut e, &f, &batch, &opts).unwrap();
        assert_eq!(checksum(&e.input_cali), in_before);
        assert_ne!(checksum(&e.output_cali), checksum(&{
            let mut r2 = rng(41);
            Expert::new("rel", dims(), 1e-3, &mut r2).output_cali
        }));
    }

    #[test]
    fn frozen_input_mode_works_without_vjp_support() {
        // LOCF exposes input_vjp, but frozen mode must not rely on it: wrap
        // a forecaster whose vjp always errors.
        struct NoVjp(LocfForecaster);
        impl SourceForecaster for NoVjp {
            fn dims(&self) -> GridDims {
                self.0.dims()
            }
            fn kind(&self) -> &'static str {
                "novjp"
            }
            fn predict(&self, l: &GriddedWindow, q: &GriddedWindow) -> Result<Mat> {
                self.0.predict(l, q)
            }
            fn input_vjp(&self, _: &GriddedWindow, _: &GriddedWindow, _: &Mat) -> Result<Mat> {
                Err(Error::Invariant("opaque forecaster".into()))
            }
            fn param_checksum(&self) -> u64 {
                self.0.param_checksum()
            }
        }
        let mut r = rng(45);
        let mut e = Expert::new("rel", dims(), 1e-3, &mut r);
        let f = NoVjp(LocfForecaster::new(dims()));
        let ex = example(46);
        let opts = AdaptOptions { input_cali: InputCali::Frozen, ..AdaptOptions::default() };
        expert_adapt(&mut e, &f, &[&ex], &opts).unwrap();
    }

    #[test]
    fn expert_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rel.ckpt");
        let mut r = rng(47);
        let mut e = Expert::new("reliable", dims(), 1e-3, &mut r);
        scramble(&mut e.input_cali, &mut r);
        scramble(&mut e.output_cali, &mut r);
        save_expert(&path, &e, "reliable", dims()).unwrap();
        let loaded = load_expert(&path, "reliable").unwrap();
        assert_eq!(checksum(&loaded), checksum(&e));
        assert_eq!(loaded.lr, 1e-3);
        assert!(load_expert(&path, "unreliable").is_err());
    }
}
