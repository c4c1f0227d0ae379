//! Central finite-difference gradient checking in 64-bit arithmetic.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Input and flat coordinate where the maximum occurred.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Number of coordinates to perturb per input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// A seeded random subset of at most this many coordinates per input.
    Sample { per_input: usize, seed: u64 },
}

/// Checks every coordinate of a single input.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_multi(f, std::slice::from_ref(x), eps, Coverage::All)
}

/// Checks `f` with respect to each of `inputs`.
pub fn grad_check_multi<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        if out.value().len() != 1 {
            return Err(Error::NotScalar {
                numel: out.value().len(),
            });
        }
        tape.backward(&out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>()
    };

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..input.len()).collect(),
            Coverage::Sample { per_input, seed } if per_input < input.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
                let mut idx = sample(&mut rng, input.len(), per_input).into_vec();
                idx.sort_unstable();
                idx
            }
            Coverage::Sample { .. } => (0..input.len()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_input = i;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Moves `pred` elements that sit within `margin` of `target` away from the
/// tie, where the absolute value has a kink and finite differences are wrong.
pub fn nudge_off_ties(pred: &mut Tensor<f64>, target: &Tensor<f64>, margin: f64) {
    for (p, &t) in pred.data_mut().iter_mut().zip(target.data()) {
        if (*p - t).abs() < margin {
            *p = t + if *p >= t { margin } else { -margin };
        }
    }
}
