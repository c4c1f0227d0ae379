use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_model, man_forward, Bound, Init, ManConfig, ModelState};
use crate::tensor::gradcheck::{grad_check_multi, Coverage, GradCheckReport};
use crate::tensor::{mul, sum, OpKind, Tensor};
use crate::Result;

/// Result of a finite-difference check through a whole network.
#[derive(Clone, Debug)]
pub struct NetworkCheck {
    pub report: GradCheckReport,
    /// Parameter path of the worst coordinate, or `input`.
    pub worst: String,
}

/// Parameters drawn so that every branch contributes at order one, which
/// keeps the check sensitive through the small residual scales used at
/// initialization.
pub fn randomized_state(config: &ManConfig, seed: u64) -> Result<ModelState<f64>> {
    let mut state = build_model(config, seed)?.cast::<f64>();
    let inventory = super::param_inventory(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    for spec in inventory {
        let t = state.get_mut(&spec.name)?;
        let (lo, hi) = match spec.init {
            Init::Ones => (0.5, 1.5),
            Init::Lambda => (-1.0, 1.0),
            Init::Zeros | Init::TruncNormal => (-0.5, 0.5),
        };
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    }
    Ok(state)
}

/// Central-difference check of `sum(man(lr) ⊙ probe)` with respect to the
/// input and every parameter tensor, in 64-bit arithmetic. `per_param`
/// limits the coordinates sampled per tensor; `None` checks all of them.
pub fn check_network(
    config: &ManConfig,
    seed: u64,
    size: usize,
    per_param: Option<usize>,
    fault: Option<OpKind>,
) -> Result<NetworkCheck> {
    let state = randomized_state(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let lr = Tensor::<f64>::rand_uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
    let s = config.scale;
    let probe = Tensor::<f64>::rand_uniform([1, 3, size * s, size * s], -1.0, 1.0, &mut rng);
    let names: Vec<String> = state.params().keys().cloned().collect();
    let mut inputs = vec![lr];
    inputs.extend(state.params().values().cloned());
    let coverage = match per_param {
        Some(n) => Coverage::Sample { per_input: n, seed },
        None => Coverage::All,
    };
    let report = grad_check_multi(
        |tape, vars| {
            tape.inject_backward_fault(fault);
            let bound: Bound<'_, f64> = names.iter().cloned().zip(vars[1..].iter().cloned()).collect();
            let out = man_forward(&vars[0], config, &bound)?;
            sum(&mul(&out, &tape.constant(probe.clone()))?)
        },
        &inputs,
        1e-4,
        coverage,
    )?;
    let worst = match report.worst_input {
        0 => "input".to_string(),
        i => names[i - 1].clone(),
    };
    Ok(NetworkCheck { report, worst })
}
