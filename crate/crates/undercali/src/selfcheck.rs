//! Built-in gradient verification: every analytic backward pass in the
//! crate checked against central finite differences on a small synthetic
//! fixture. Meant for `undercali gradcheck` and CI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffkit::{grad_check, zero_grads, GradCheckReport, ParamSet};
use crate::error::Result;
use crate::forecaster::{
    train_offline, GridDims, LinearGridForecaster, SourceForecaster, TrainConfig,
};
use crate::gdc::{accumulate_grads, batch_loss, AdaptOptions, CalibratorBlock, Expert};
use crate::imts_data::{grid_dataset, GriddedExample, GridSpec};
use crate::mat::Mat;
use crate::shiftgen::{Regime, ShiftScenario};
use crate::uncertainty::UncertaintyEstimator;

pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.worst_rel < GRAD_TOLERANCE
    }
}

fn jitter_params<S: ParamSet>(set: &mut S, scale: f64, rng: &mut ChaCha8Rng) {
    set.for_each_param_mut(&mut |_, p| {
        for v in p.value.as_mut_slice() {
            let e: f64 = rng.sample(StandardNormal);
            *v += scale * e;
        }
    });
}

fn fixture_examples(seed: u64) -> Result<(Vec<GriddedExample>, GridDims)> {
    let grid = GridSpec { l_in: 5, l_out: 3, window_start: 0.0, window_end: 8.0 };
    let scenario = ShiftScenario {
        n_vars: 2,
        n_samples: 24,
        grid,
        regimes: vec![Regime {
            start_frac: 0.0,
            mean_offset: vec![0.3, -0.2],
            ar_coeff: 0.5,
            noise_scale: 1.0,
            missing_rate: 0.25,
        }],
        seed,
    };
    scenario.validate()?;
    let samples: Vec<_> = scenario.iter().collect();
    let examples = grid_dataset(&samples, &grid)?;
    Ok((examples, GridDims { l_in: 5, l_out: 3, n_vars: 2 }))
}

fn randn_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Mat::from_vec(rows, cols, data).expect("sized by construction")
}

fn check_calibrator(rng: &mut ChaCha8Rng) -> Result<SuiteEntry> {
    let mut block = CalibratorBlock::new("chk", 5, 2, rng);
    jitter_params(&mut block, 0.1, rng);
    let v = randn_mat(5, 2, rng);
    let target = randn_mat(5, 2, rng);
    let n = (v.rows() * v.cols()) as f64;

    zero_grads(&mut block);
    let (out, trace) = block.calibrate(&v)?;
    let upstream = out.sub(&target).map(|d| 2.0 * d / n);
    block.backward(&trace, &upstream)?;

    let report = grad_check(&mut block, |b: &CalibratorBlock| {
        let y = b.forward(&v)?;
        let mut acc = 0.0;
        for (a, t) in y.as_slice().iter().zip(target.as_slice()) {
            acc += (a - t) * (a - t);
        }
        Ok(acc / n)
    })?;
    Ok(SuiteEntry { name: "calibrator", report })
}

fn check_expert_path(seed: u64, rng: &mut ChaCha8Rng) -> Result<SuiteEntry> {
    let (examples, dims) = fixture_examples(seed)?;
    let (train, rest) = examples.split_at(12);
    let batch: Vec<&GriddedExample> = rest.iter().take(6).collect();

    let mut f = LinearGridForecaster::new(dims);
    let cfg = TrainConfig { max_epochs: 15, seed, ..TrainConfig::default() };
    train_offline(&mut f, train, &[], &cfg)?;

    let mut expert = Expert::new("chk", dims, 1e-3, rng);
    jitter_params(&mut expert, 0.05, rng);

    let opts = AdaptOptions::default();
    zero_grads(&mut expert);
    accumulate_grads(&mut expert, &f, &batch, &opts)?;
    let report = grad_check(&mut expert, |e: &Expert| {
        batch_loss(e, &f, &batch, opts.loss_norm)
    })?;
    Ok(SuiteEntry { name: "expert_through_forecaster", report })
}

fn check_ue_l1(seed: u64, rng: &mut ChaCha8Rng) -> Result<SuiteEntry> {
    let (examples, dims) = fixture_examples(seed ^ 0x5eed)?;
    let f = LinearGridForecaster::new(dims);
    let mut ue = UncertaintyEstimator::new(dims, rng);

    let batch: Vec<&GriddedExample> = examples.iter().take(8).collect();
    let mut rows = Vec::new();
    for ex in &batch {
        let pred = f.predict(&ex.lookback, &ex.query)?;
        rows.push(ue.featurize(&ex.lookback, &pred, &ex.query.mask)?);
    }
    let x = Mat::from_rows(&rows)?;
    // Targets offset from the current scores so every residual sits well
    // away from the absolute-value kink.
    let y0 = ue.mlp.forward(&x)?;
    let u: Vec<f64> = (0..x.rows())
        .map(|i| {
            let s = y0.get(i, 0);
            (s + if i % 2 == 0 { 0.05 } else { -0.05 }).clamp(0.0, 1.0)
        })
        .collect();

    zero_grads(&mut ue);
    crate::uncertainty::l1_pass(&mut ue, &x, &u, true)?;
    let report = grad_check(&mut ue, |m: &UncertaintyEstimator| {
        let y = m.mlp.forward(&x)?;
        let n = u.len() as f64;
        let mut acc = 0.0;
        for (row, t) in (0..y.rows()).zip(&u) {
            acc += (y.get(row, 0) - t).abs();
        }
        Ok(acc / n)
    })?;
    Ok(SuiteEntry { name: "ue_l1", report })
}

/// Verify every backward pass: the calibrator block alone, the full expert
/// loss through a trained frozen forecaster, and the estimator's L1
/// objective.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        check_calibrator(&mut rng)?,
        check_expert_path(seed, &mut rng)?,
        check_ue_l1(seed, &mut rng)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_correct_gradients() {
        for entry in standard_suite(11).unwrap() {
            assert!(
                entry.passed(),
                "{} worst {} at {}[{}]",
                entry.name,
                entry.report.worst_rel,
                entry.report.worst_name,
                entry.report.worst_index
            );
            assert!(entry.report.n_checked > 0);
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = CalibratorBlock::new("bad", 5, 2, &mut rng);
        jitter_params(&mut block, 0.1, &mut rng);
        let v = randn_mat(5, 2, &mut rng);
        let target = Mat::zeros(5, 2);
        let n = 10.0;

        zero_grads(&mut block);
        let (out, trace) = block.calibrate(&v).unwrap();
        let upstream = out.sub(&target).map(|d| 2.0 * d / n);
        block.backward(&trace, &upstream).unwrap();
        // Sabotage one stored gradient.
        block.for_each_param_mut(&mut |name, p| {
            if name.ends_with("gate") {
                p.grad.as_mut_slice()[0] += 0.37;
            }
        });

        let report = grad_check(&mut block, |b: &CalibratorBlock| {
            let y = b.forward(&v)?;
            Ok(y.as_slice().iter().zip(target.as_slice()).map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / n)
        })
        .unwrap();
        assert!(report.worst_rel > GRAD_TOLERANCE);
        assert!(report.worst_name.ends_with("gate"));
    }
}
