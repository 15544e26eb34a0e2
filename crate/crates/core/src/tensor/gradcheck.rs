//! Central finite-difference verification of analytic gradients (64-bit).

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Perturbation used for central differences.
pub const STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than
/// relatively; keeps rounding noise on near-zero partials from dominating.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst_at: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst_rel_err < tolerance
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares every partial of the scalar `f(inputs)` against central
/// differences with step [`STEP`].
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(out.item())
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars)?;
    if out.value().len() != 1 {
        return Err(Error::usage("grad_check needs a scalar-valued function"));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_or_zero(v)).collect();

    let mut report = GradCheckReport {
        worst_rel_err: 0.0,
        worst_at: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.worst_rel_err || report.checked == 1 {
                report.worst_rel_err = err;
                report.worst_at = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued output to a scalar with fixed pseudo-random
/// weights so every output element contributes a distinct sensitivity.
pub fn weighted_readout<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let weights = Tensor::from_fn(y.shape(), |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    });
    y.mul_const(&weights).map(|v| v.sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let good = grad_check(
            |_, v| Ok(v[0].square().sum()),
            &[Tensor::new([2], vec![0.3, -1.2]).unwrap()],
        )
        .unwrap();
        assert!(good.passes(1e-8));

        let bad = grad_check(
            |_, v| {
                // value of x² but gradient of x (detach trick)
                let x = v[0];
                let sq = x.square().detach();
                Ok(sq.add(x)?.sub(x.detach())?.sum())
            },
            &[Tensor::new([1], vec![2.0]).unwrap()],
        )
        .unwrap();
        assert!(!bad.passes(1e-2));
    }
}
