//! Synthetic irregular-stream generator with controllable distribution
//! shifts.
//!
//! Each sample is an AR(1) path per variable sampled at uniform ticks across
//! the grid window, then thinned cell-by-cell with the active regime's
//! missing rate. Regimes switch at fixed fractions of the stream, shifting
//! the process mean, autocorrelation, noise scale, and missingness pattern.
//!
//! RNG: ChaCha8 seeded with the scenario seed, one stream per sample index
//! (`set_stream(i)`), so sample `i` is reproducible in isolation and the
//! output is identical across platforms. Draw order per sample: for each
//! variable, the stationary init then one innovation per remaining tick;
//! then one uniform per cell in row-major order for thinning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imts_data::{GridSpec, ImtsSample};
use crate::mat::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Regime {
    /// Position in the stream where this regime takes over, as a fraction of
    /// `n_samples`. The first regime must start at 0.
    pub start_frac: f64,
    /// Per-variable process mean. A single entry broadcasts to all variables.
    pub mean_offset: Vec<f64>,
    pub ar_coeff: f64,
    pub noise_scale: f64,
    pub missing_rate: f64,
}

impl Regime {
    fn mean(&self, var: usize) -> f64 {
        if self.mean_offset.len() == 1 {
            self.mean_offset[0]
        } else {
            self.mean_offset[var]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftScenario {
    pub n_vars: usize,
    pub n_samples: usize,
    pub grid: GridSpec,
    pub regimes: Vec<Regime>,
    pub seed: u64,
}

impl ShiftScenario {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_vars == 0 {
            return Err(Error::Config("n_vars must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config("at least one regime required".into()));
        }
        if self.regimes[0].start_frac != 0.0 {
            return Err(Error::Config("first regime must start at fraction 0".into()));
        }
        for w in self.regimes.windows(2) {
            if !(w[1].start_frac > w[0].start_frac) {
                return Err(Error::Config("regime start fractions must be strictly increasing".into()));
            }
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if !(0.0..1.0).contains(&r.start_frac) {
                return Err(Error::Config(format!("regime {i}: start fraction outside [0, 1)")));
            }
            if !(r.ar_coeff.abs() < 1.0) {
                return Err(Error::Config(format!("regime {i}: |ar_coeff| must be < 1")));
            }
            if !(0.0..1.0).contains(&r.missing_rate) {
                return Err(Error::Config(format!("regime {i}: missing rate outside [0, 1)")));
            }
            if !(r.noise_scale >= 0.0 && r.noise_scale.is_finite()) {
                return Err(Error::Config(format!(
                    "regime {i}: noise scale must be finite and >= 0"
                )));
            }
            if r.mean_offset.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("regime {i}: non-finite mean offset")));
            }
            if r.mean_offset.len() != 1 && r.mean_offset.len() != self.n_vars {
                return Err(Error::Config(format!(
                    "regime {i}: {} mean offsets for {} variables",
                    r.mean_offset.len(),
                    self.n_vars
                )));
            }
        }
        Ok(())
    }

    pub fn regime_at(&self, sample_index: usize) -> &Regime {
        let frac = sample_index as f64 / self.n_samples as f64;
        self.regimes
            .iter()
            .rev()
            .find(|r| r.start_frac <= frac)
            .unwrap_or(&self.regimes[0])
    }

    /// Generate sample `i` (random access; independent of other samples).
    pub fn sample(&self, i: usize) -> ImtsSample {
        let regime = self.regime_at(i);
        let g = &self.grid;
        let k = g.l_in + g.l_out;
        let w = (g.window_end - g.window_start) / k as f64;
        let split = g.window_start + g.l_in as f64 * w;
        let c = self.n_vars;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);

        // AR(1) per variable from its stationary distribution.
        let mut path = Mat::zeros(k, c);
        for v in 0..c {
            let mean = regime.mean(v);
            let a = regime.ar_coeff;
            let s = regime.noise_scale;
            let sigma_st = s / (1.0 - a * a).sqrt();
            let e0: f64 = rng.sample(StandardNormal);
            let mut x = mean + sigma_st * e0;
            path.set(0, v, x);
            for t in 1..k {
                let e: f64 = rng.sample(StandardNormal);
                x = mean + a * (x - mean) + s * e;
                path.set(t, v, x);
            }
        }

        let mut keep = vec![vec![false; c]; k];
        for row in keep.iter_mut() {
            for cell in row.iter_mut() {
                *cell = rng.random::<f64>() >= regime.missing_rate;
            }
        }
        // Thinning may wipe out a whole half; each half must retain at least
        // one observation for the sample to be usable, so pin one cell back.
        if !keep[..g.l_in].iter().flatten().any(|&b| b) {
            keep[0][0] = true;
        }
        if !keep[g.l_in..].iter().flatten().any(|&b| b) {
            keep[g.l_in][0] = true;
        }

        let mut timestamps = Vec::new();
        let mut rows = Vec::new();
        let mut mask_rows = Vec::new();
        for t in 0..k {
            if !keep[t].iter().any(|&b| b) {
                continue;
            }
            timestamps.push(g.window_start + (t as f64 + 0.5) * w);
            let mut vals = vec![0.0; c];
            let mut mask = vec![0.0; c];
            for v in 0..c {
                if keep[t][v] {
                    vals[v] = path.get(t, v);
                    mask[v] = 1.0;
                }
            }
            rows.push(vals);
            mask_rows.push(mask);
        }
        ImtsSample::new(
            timestamps,
            Mat::from_rows(&rows).expect("rows are rectangular"),
            Mat::from_rows(&mask_rows).expect("rows are rectangular"),
            split,
        )
        .expect("generated sample satisfies all invariants")
    }

    pub fn iter(&self) -> impl Iterator<Item = ImtsSample> + '_ {
        (0..self.n_samples).map(|i| self.sample(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_scenario() -> ShiftScenario {
        ShiftScenario {
            n_vars: 2,
            n_samples: 200,
            grid: GridSpec { l_in: 8, l_out: 4, window_start: 0.0, window_end: 12.0 },
            regimes: vec![Regime {
                start_frac: 0.0,
                mean_offset: vec![0.0],
                ar_coeff: 0.5,
                noise_scale: 1.0,
                missing_rate: 0.2,
            }],
            seed: 42,
        }
    }

    #[test]
    fn same_seed_gives_identical_streams() {
        let sc = base_scenario();
        sc.validate().unwrap();
        let a: Vec<_> = sc.iter().collect();
        let b: Vec<_> = sc.iter().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let sc = base_scenario();
        let mut sc2 = base_scenario();
        sc2.seed = 43;
        assert_ne!(sc.sample(0), sc2.sample(0));
    }

    #[test]
    fn zero_missing_rate_keeps_every_cell() {
        let mut sc = base_scenario();
        sc.regimes[0].missing_rate = 0.0;
        for s in sc.iter().take(20) {
            assert_eq!(s.n_rows(), 12);
            assert!(s.mask.as_slice().iter().all(|&m| m == 1.0));
        }
    }

    #[test]
    fn stationary_stream_has_matched_halves() {
        let mut sc = base_scenario();
        sc.n_samples = 400;
        // Two regimes with identical parameters: statistically one regime.
        sc.regimes.push(Regime { start_frac: 0.5, ..sc.regimes[0].clone() });
        sc.validate().unwrap();
        let samples: Vec<_> = sc.iter().collect();
        let half_mean = |chunk: &[ImtsSample]| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for s in chunk {
                for (v, m) in s.values.as_slice().iter().zip(s.mask.as_slice()) {
                    acc += v * m;
                    n += m;
                }
            }
            acc / n
        };
        let d = half_mean(&samples[..200]) - half_mean(&samples[200..]);
        assert!(d.abs() < 0.2, "half-mean difference {d}");
    }

    #[test]
    fn mean_shift_shows_up_at_the_boundary() {
        let mut sc = base_scenario();
        sc.n_samples = 400;
        sc.regimes.push(Regime {
            start_frac: 0.5,
            mean_offset: vec![3.0],
            ..sc.regimes[0].clone()
        });
        let samples: Vec<_> = sc.iter().collect();
        let half_mean = |chunk: &[ImtsSample]| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for s in chunk {
                for (v, m) in s.values.as_slice().iter().zip(s.mask.as_slice()) {
                    acc += v * m;
                    n += m;
                }
            }
            acc / n
        };
        let jump = half_mean(&samples[200..]) - half_mean(&samples[..200]);
        assert!((jump - 3.0).abs() < 0.5, "observed jump {jump}, expected near 3");
    }

    #[test]
    fn regime_boundaries_respect_fractions() {
        let mut sc = base_scenario();
        sc.n_samples = 100;
        sc.regimes.push(Regime {
            start_frac: 0.25,
            mean_offset: vec![5.0],
            ..sc.regimes[0].clone()
        });
        assert_eq!(sc.regime_at(24).mean(0), 0.0);
        assert_eq!(sc.regime_at(25).mean(0), 5.0);
        assert_eq!(sc.regime_at(99).mean(0), 5.0);
    }

    #[test]
    fn per_variable_offsets_apply() {
        let mut sc = base_scenario();
        sc.n_samples = 300;
        sc.regimes[0].mean_offset = vec![-2.0, 4.0];
        sc.regimes[0].missing_rate = 0.0;
        sc.validate().unwrap();
        let mut means = [0.0; 2];
        let mut n = 0.0;
        for s in sc.iter() {
            for r in 0..s.n_rows() {
                means[0] += s.values.get(r, 0);
                means[1] += s.values.get(r, 1);
                n += 1.0;
            }
        }
        assert!((means[0] / n + 2.0).abs() < 0.3);
        assert!((means[1] / n - 4.0).abs() < 0.3);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut sc = base_scenario();
        sc.regimes[0].start_frac = 0.1;
        assert!(sc.validate().is_err());

        let mut sc = base_scenario();
        sc.regimes.push(sc.regimes[0].clone()); // equal start fractions
        assert!(sc.validate().is_err());

        let mut sc = base_scenario();
        sc.regimes[0].ar_coeff = 1.0;
        assert!(sc.validate().is_err());

        let mut sc = base_scenario();
        sc.regimes[0].missing_rate = 1.0;
        assert!(sc.validate().is_err());

        let mut sc = base_scenario();
        sc.regimes[0].mean_offset = vec![1.0, 2.0, 3.0];
        assert!(sc.validate().is_err());
    }

    #[test]
    fn heavy_thinning_still_yields_valid_samples() {
        let mut sc = base_scenario();
        sc.n_vars = 1;
        sc.regimes[0].missing_rate = 0.97;
        for s in sc.iter().take(100) {
            // Constructor validation ran; both halves must be present.
            assert!(s.timestamps.iter().any(|&t| t <= s.split_time));
            assert!(s.timestamps.iter().any(|&t| t > s.split_time));
        }
    }

    #[test]
    fn samples_grid_cleanly() {
        use crate::imts_data::to_grid;
        let sc = base_scenario();
        let (look, _, target) = to_grid(&sc.sample(0), &sc.grid).unwrap();
        assert_eq!(look.values.rows(), 8);
        assert_eq!(target.values.rows(), 4);
        // Ticks sit at slot centers, so no slot ever aggregates two rows:
        // observed slot values match raw observations exactly.
        let s = sc.sample(0);
        let w = 1.0;
        for (r, &t) in s.timestamps.iter().enumerate() {
            let slot = (t / w) as usize;
            for v in 0..s.n_vars() {
                if s.mask.get(r, v) == 1.0 {
                    let (win, row) =
                        if slot < 8 { (&look, slot) } else { (&target, slot - 8) };
                    assert_eq!(win.values.get(row, v), s.values.get(r, v));
                    assert_eq!(win.mask.get(row, v), 1.0);
                }
            }
        }
    }
}
