//! Dense MLP with row-vector convention: each row of the input matrix is one
//! item, layer output is `x W + b` with `W` shaped in x out.

use rand::Rng;

use super::{Param, ParamSet};
use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    fn dydx_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
    pub act: Activation,
}

impl Dense {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(fan_in: usize, fan_out: usize, act: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = Mat::zeros(fan_in, fan_out);
        for x in w.as_mut_slice() {
            *x = rng.random_range(-limit..limit);
        }
        Dense { w: Param::new(w), b: Param::zeros(1, fan_out), act }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize, act: Activation) -> Self {
        Dense { w: Param::zeros(fan_in, fan_out), b: Param::zeros(1, fan_out), act }
    }
}

/// Per-layer activations cached by a forward pass; `outs[0]` is the input,
/// `outs[i+1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    outs: Vec<Mat>,
}

impl MlpTrace {
    pub fn output(&self) -> &Mat {
        self.outs.last().expect("trace always holds the input")
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    name: String,
}

impl Mlp {
    /// `sizes` lists layer widths input-first; `acts` has one entry per layer.
    pub fn xavier(name: &str, sizes: &[usize], acts: &[Activation], rng: &mut impl Rng) -> Self {
        assert_eq!(sizes.len(), acts.len() + 1, "one activation per layer");
        let layers = acts
            .iter()
            .enumerate()
            .map(|(i, &act)| Dense::xavier(sizes[i], sizes[i + 1], act, rng))
            .collect();
        Mlp { layers, name: name.to_string() }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.value.rows())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.value.cols())
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        Ok(self.trace(x)?.outs.pop().expect("trace always holds the input"))
    }

    /// Forward pass keeping everything backward needs.
    pub fn trace(&self, x: &Mat) -> Result<MlpTrace> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "{}: input width {} but first layer expects {}",
                self.name,
                x.cols(),
                self.in_dim()
            )));
        }
        let mut outs = Vec::with_capacity(self.layers.len() + 1);
        outs.push(x.clone());
        for layer in &self.layers {
            let prev = outs.last().unwrap();
            let mut y = prev.matmul(&layer.w.value);
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    let z = y.get(r, c) + layer.b.value.get(0, c);
                    y.set(r, c, layer.act.apply(z));
                }
            }
            outs.push(y);
        }
        Ok(MlpTrace { outs })
    }

    /// Accumulate parameter gradients for `dL/d(output) = upstream` and
    /// return `dL/d(input)`.
    pub fn backward(&mut self, trace: &MlpTrace, upstream: &Mat) -> Result<Mat> {
        if trace.outs.len() != self.layers.len() + 1 {
            return Err(Error::Shape(format!("{}: trace from a different net", self.name)));
        }
        if !upstream.same_shape(trace.output()) {
            return Err(Error::Shape(format!("{}: upstream shape mismatch", self.name)));
        }
        let mut d = upstream.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let y = &trace.outs[i + 1];
            // Through the activation.
            let mut d_pre = d;
            for (dp, &yo) in d_pre.as_mut_slice().iter_mut().zip(y.as_slice()) {
                *dp *= layer.act.dydx_from_output(yo);
            }
            let x = &trace.outs[i];
            layer.w.grad.add_assign(&x.matmul_tn(&d_pre));
            for r in 0..d_pre.rows() {
                for c in 0..d_pre.cols() {
                    layer.b.grad.add_at(0, c, d_pre.get(r, c));
                }
            }
            d = d_pre.matmul_nt(&layer.w.value);
        }
        Ok(d)
    }
}

impl ParamSet for Mlp {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("{}.l{}.w", self.name, i), &layer.w);
            f(&format!("{}.l{}.b", self.name, i), &layer.b);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("{}.l{}.w", self.name, i), &mut layer.w);
            f(&format!("{}.l{}.b", self.name, i), &mut layer.b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_linear_layer_is_affine() {
        let mut net = Mlp {
            layers: vec![Dense::zeroed(2, 1, Activation::Linear)],
            name: "t".into(),
        };
        net.layers[0].w.value = Mat::from_vec(2, 1, vec![2.0, -1.0]).unwrap();
        net.layers[0].b.value = Mat::from_vec(1, 1, vec![0.5]).unwrap();
        let x = Mat::from_rows(&[vec![1.0, 1.0], vec![3.0, 0.0]]).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.col(0), vec![1.5, 6.5]);
    }

    #[test]
    fn rows_are_independent_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::xavier("t", &[3, 5, 2], &[Activation::Tanh, Activation::Linear], &mut rng);
        let x = Mat::from_rows(&[vec![0.1, -0.2, 0.3], vec![1.0, 2.0, -3.0]]).unwrap();
        let y_batch = net.forward(&x).unwrap();
        for r in 0..2 {
            let y_single = net.forward(&Mat::from_vec(1, 3, x.row(r).to_vec()).unwrap()).unwrap();
            assert_eq!(y_single.row(0), y_batch.row(r));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::diffkit::{grad_check, zero_grads};

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Mlp::xavier(
            "t",
            &[3, 4, 4, 1],
            &[Activation::Tanh, Activation::Relu, Activation::Sigmoid],
            &mut rng,
        );
        let x = Mat::from_rows(&[
            vec![0.3, -0.7, 0.2],
            vec![-1.1, 0.4, 0.9],
            vec![0.0, 0.0, 1.3],
        ])
        .unwrap();
        // Loss: sum of outputs.
        let trace = net.trace(&x).unwrap();
        let ones = Mat::filled(3, 1, 1.0);
        zero_grads(&mut net);
        net.backward(&trace, &ones).unwrap();
        let report = grad_check(&mut net, |n: &Mlp| Ok(n.forward(&x)?.sum())).unwrap();
        assert!(report.worst_rel < 1e-6, "{report:?}");
    }

    #[test]
    fn backward_input_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut net = Mlp::xavier("t", &[2, 6, 1], &[Activation::Tanh, Activation::Linear], &mut rng);
        let x = Mat::from_vec(1, 2, vec![0.4, -0.9]).unwrap();
        let trace = net.trace(&x).unwrap();
        let dx = net.backward(&trace, &Mat::filled(1, 1, 1.0)).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            xp.set(0, j, x.get(0, j) + h);
            let mut xm = x.clone();
            xm.set(0, j, x.get(0, j) - h);
            let num = (net.forward(&xp).unwrap().sum() - net.forward(&xm).unwrap().sum()) / (2.0 * h);
            assert!((dx.get(0, j) - num).abs() < 1e-6, "col {j}: {} vs {num}", dx.get(0, j));
        }
    }

    #[test]
    fn xavier_respects_fan_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dense::xavier(10, 14, Activation::Tanh, &mut rng);
        let limit = (6.0 / 24.0f64).sqrt();
        assert!(d.w.value.as_slice().iter().all(|x| x.abs() < limit));
        assert!(d.b.value.as_slice().iter().all(|&x| x == 0.0));
    }
}
