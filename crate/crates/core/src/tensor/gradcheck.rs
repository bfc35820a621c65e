//! Finite-difference validation of the backward pass.

use super::params::ParameterSet;
use super::tape::{Tape, Var};

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the loss deterministically from the supplied
/// parameters (inputs captured by the closure stay fixed). At most
/// `max_coords_per_param` coordinates per parameter are probed, spread evenly
/// across each tensor. Returns the max over probed coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// Relu derivatives are taken as 0 at exactly 0, so callers should evaluate
/// at points where no pre-activation sits within `h` of a kink.
pub fn gradient_check<F>(
    build: F,
    params: &ParameterSet,
    h: f64,
    max_coords_per_param: usize,
) -> f64
where
    F: Fn(&mut Tape, &ParameterSet) -> Var,
{
    assert!(h > 0.0, "step must be positive");
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let grads = tape
        .backward(loss, params)
        .expect("gradient_check loss must be scalar and finite");

    let mut max_rel = 0.0_f64;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let numel = params.get(name).unwrap().numel();
        let probes = numel.min(max_coords_per_param.max(1));
        let stride = (numel / probes).max(1);
        for probe in 0..probes {
            let coord = probe * stride;
            if coord >= numel {
                break;
            }
            let analytic = grads.get(name).unwrap().data()[coord];

            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[coord] += h;
            let mut tape_p = Tape::new();
            let loss_p = build(&mut tape_p, &plus);
            let lp = tape_p.value(loss_p).item();

            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[coord] -= h;
            let mut tape_m = Tape::new();
            let loss_m = build(&mut tape_m, &minus);
            let lm = tape_m.value(loss_m).item();

            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
