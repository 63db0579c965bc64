#![allow(dead_code)]

use diffgraph::{numeric_gradient, relative_error, ParamGrads, ParameterSet};

pub const ABS_FLOOR: f64 = 1e-8;

/// Worst coordinate-wise relative error between `analytic` and central
/// differences of `f` over every parameter named in `analytic`. Coordinates
/// where both sides are below `ABS_FLOOR` are skipped: there the central
/// difference is pure roundoff.
pub fn param_fd(params: &ParameterSet, analytic: &ParamGrads, step: f64, f: impl Fn(&ParameterSet) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for (name, grad) in analytic {
        let base = params.tensor(name).unwrap().clone();
        let numeric = numeric_gradient(
            |probe| {
                let mut p = params.clone();
                *p.tensor_mut(name).unwrap() = probe.clone();
                Ok(f(&p))
            },
            &base,
            step,
        )
        .unwrap();
        for (a, n) in grad.data().iter().zip(numeric.data()) {
            if a.abs() < ABS_FLOOR && n.abs() < ABS_FLOOR {
                continue;
            }
            worst = worst.max(relative_error(*a, *n));
        }
    }
    worst
}
