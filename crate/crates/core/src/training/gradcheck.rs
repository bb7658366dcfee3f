//! Central finite-difference checks against analytic gradients.

use crate::params::{vec_entry, ParamSet};
use crate::scalar::Scalar;

/// A bare vector viewed as a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct VecParam<T>(pub Vec<T>);

impl<T: Scalar> ParamSet<T> for VecParam<T> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        vec![vec_entry("v", &self.0)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel: f64,
    /// `tensor[index]` of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel.is_finite() && self.max_rel < tol
    }
}

/// Compares `analytic` with central differences of `loss` at every coordinate
/// (or every `stride`-th one). Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck<P: ParamSet<f64>>(
    params: &P,
    loss: impl Fn(&P) -> f64,
    analytic: &P,
    step: f64,
    floor: f64,
    stride: usize,
) -> GradcheckReport {
    let names: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.0.clone(), t.2.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.2.to_vec()).collect();
    let mut report = GradcheckReport { checked: 0, max_rel: 0.0, worst: String::new(), analytic: 0.0, numeric: 0.0 };
    let mut probe = params.clone();
    let mut flat = 0usize;
    for (ti, (name, len)) in names.iter().enumerate() {
        for i in 0..*len {
            flat += 1;
            if (flat - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = probe.tensors()[ti].2[i];
            probe.tensors_mut()[ti][i] = orig + step;
            let up = loss(&probe);
            probe.tensors_mut()[ti][i] = orig - step;
            let down = loss(&probe);
            probe.tensors_mut()[ti][i] = orig;
            let n = (up - down) / (2.0 * step);
            let a = grads[ti][i];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.checked += 1;
            if !(rel <= report.max_rel) {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}]");
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    report
}
