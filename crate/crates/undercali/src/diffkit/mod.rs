//! Minimal training kernel: parameters with Adam state, a dense MLP with
//! hand-written backward, finite-difference gradient checking, and JSON
//! checkpoints. All math is f64; forward passes cache what backward needs so
//! gradients are exact for the computed graph.

mod checkpoint;
mod gradcheck;
mod mlp;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, Tensor};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mlp::{Activation, Dense, Mlp, MlpTrace};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// One tensor-valued parameter with its gradient accumulator and Adam
/// moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Mat,
    pub grad: Mat,
    m: Mat,
    v: Mat,
    t: u64,
}

impl Param {
    pub fn new(value: Mat) -> Self {
        let (r, c) = value.shape();
        Param { value, grad: Mat::zeros(r, c), m: Mat::zeros(r, c), v: Mat::zeros(r, c), t: 0 }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Mat::zeros(rows, cols))
    }

    /// Replace the value, resetting gradient and optimizer state.
    pub fn reset_to(&mut self, value: Mat) {
        let (r, c) = value.shape();
        self.value = value;
        self.grad = Mat::zeros(r, c);
        self.m = Mat::zeros(r, c);
        self.v = Mat::zeros(r, c);
        self.t = 0;
    }
}

/// Anything holding named parameters. Iteration order must be deterministic;
/// names must be unique within a set.
pub trait ParamSet {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));
}

pub fn zero_grads<S: ParamSet + ?Sized>(set: &mut S) {
    set.for_each_param_mut(&mut |_, p| p.grad.fill(0.0));
}

/// Name of the first parameter with a non-finite gradient entry, if any.
pub fn find_non_finite_grad<S: ParamSet + ?Sized>(set: &S) -> Option<String> {
    let mut bad = None;
    set.for_each_param(&mut |name, p| {
        if bad.is_none() && !p.grad.all_finite() {
            bad = Some(name.to_string());
        }
    });
    bad
}

/// FNV-1a digest over parameter names and value bits. Two sets collide only
/// if they hold identical values under identical names, so an unchanged
/// checksum across an update demonstrates the set was untouched.
pub fn checksum<S: ParamSet + ?Sized>(set: &S) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    set.for_each_param(&mut |name, p| {
        eat(name.as_bytes());
        for &x in p.value.as_slice() {
            eat(&x.to_bits().to_le_bytes());
        }
    });
    h
}

/// Snapshot all parameter values (not optimizer state), in iteration order.
pub fn export_values<S: ParamSet + ?Sized>(set: &S) -> Vec<(String, Mat)> {
    let mut out = Vec::new();
    set.for_each_param(&mut |name, p| out.push((name.to_string(), p.value.clone())));
    out
}

/// Restore values from [`export_values`]. Optimizer state is kept as-is.
pub fn import_values<S: ParamSet + ?Sized>(set: &mut S, vals: &[(String, Mat)]) -> Result<()> {
    let mut err = None;
    let mut i = 0;
    set.for_each_param_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match vals.get(i) {
            Some((n, m)) if n == name && m.same_shape(&p.value) => p.value = m.clone(),
            Some((n, _)) => err = Some(format!("expected parameter {name}, snapshot has {n}")),
            None => err = Some(format!("snapshot ends before parameter {name}")),
        }
        i += 1;
    });
    if let Some(msg) = err {
        return Err(Error::Shape(msg));
    }
    if i != vals.len() {
        return Err(Error::Shape(format!("snapshot has {} extra tensors", vals.len() - i)));
    }
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update over every parameter from its accumulated gradient, then
/// zero the gradients. If any gradient entry is non-finite, no parameter is
/// touched and the offending name is reported.
pub fn adam_step<S: ParamSet + ?Sized>(set: &mut S, lr: f64) -> Result<()> {
    if let Some(name) = find_non_finite_grad(set) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    set.for_each_param_mut(&mut |_, p| {
        p.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(p.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(p.t as i32);
        for i in 0..p.value.len() {
            let g = p.grad.as_slice()[i];
            let m = ADAM_BETA1 * p.m.as_slice()[i] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * p.v.as_slice()[i] + (1.0 - ADAM_BETA2) * g * g;
            p.m.as_mut_slice()[i] = m;
            p.v.as_mut_slice()[i] = v;
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            p.value.as_mut_slice()[i] -= update;
        }
        p.grad.fill(0.0);
    });
    Ok(())
}
