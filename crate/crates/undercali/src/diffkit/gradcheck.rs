//! Central-difference verification of accumulated gradients.

use super::ParamSet;
use crate::error::Result;

const H: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst_rel: f64,
    pub worst_name: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
}

fn read_coord<S: ParamSet + ?Sized>(set: &S, name: &str, idx: usize) -> (f64, f64) {
    let mut out = (f64::NAN, f64::NAN);
    set.for_each_param(&mut |n, p| {
        if n == name {
            out = (p.value.as_slice()[idx], p.grad.as_slice()[idx]);
        }
    });
    out
}

fn write_coord<S: ParamSet + ?Sized>(set: &mut S, name: &str, idx: usize, x: f64) {
    set.for_each_param_mut(&mut |n, p| {
        if n == name {
            p.value.as_mut_slice()[idx] = x;
        }
    });
}

/// Compare every accumulated gradient entry in `set` against a central
/// difference of `loss`. The caller must have run its backward pass already;
/// `loss` must recompute the same scalar from current parameter values.
///
/// Relative error per coordinate is `|a - n| / (max(|a|, |n|) + 1e-4)`; the
/// dampened denominator keeps near-zero gradients from inflating the ratio.
pub fn grad_check<S: ParamSet + ?Sized>(
    set: &mut S,
    mut loss: impl FnMut(&S) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut coords = Vec::new();
    set.for_each_param(&mut |name, p| {
        coords.push((name.to_string(), p.value.len()));
    });
    let mut report = GradCheckReport {
        worst_rel: 0.0,
        worst_name: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        n_checked: 0,
    };
    for (name, len) in coords {
        for idx in 0..len {
            let (orig, analytic) = read_coord(set, &name, idx);
            write_coord(set, &name, idx, orig + H);
            let up = loss(set)?;
            write_coord(set, &name, idx, orig - H);
            let down = loss(set)?;
            write_coord(set, &name, idx, orig);
            let numeric = (up - down) / (2.0 * H);
            let rel = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-4);
            report.n_checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_name = name.clone();
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::Param;
    use crate::mat::Mat;

    /// loss = sum(w^2), gradient 2w.
    struct Quad(Param);

    impl ParamSet for Quad {
        fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param)) {
            f("w", &self.0);
        }
        fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            f("w", &mut self.0);
        }
    }

    fn quad_loss(q: &Quad) -> Result<f64> {
        Ok(q.0.value.as_slice().iter().map(|x| x * x).sum())
    }

    #[test]
    fn accepts_correct_gradient() {
        let mut q = Quad(Param::new(Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap()));
        q.0.grad = Mat::from_vec(1, 3, vec![1.0, -2.0, 4.0]).unwrap();
        let r = grad_check(&mut q, quad_loss).unwrap();
        assert_eq!(r.n_checked, 3);
        assert!(r.worst_rel < 1e-8, "{r:?}");
    }

    #[test]
    fn flags_wrong_gradient() {
        let mut q = Quad(Param::new(Mat::from_vec(1, 2, vec![0.5, -1.0]).unwrap()));
        q.0.grad = Mat::from_vec(1, 2, vec![1.0, 5.0]).unwrap(); // second entry wrong
        let r = grad_check(&mut q, quad_loss).unwrap();
        assert!(r.worst_rel > 0.5, "{r:?}");
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn leaves_values_untouched() {
        let mut q = Quad(Param::new(Mat::from_vec(1, 2, vec![0.5, -1.0]).unwrap()));
        q.0.grad = Mat::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        grad_check(&mut q, quad_loss).unwrap();
        assert_eq!(q.0.value.as_slice(), &[0.5, -1.0]);
    }
}
