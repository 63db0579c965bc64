use crate::error::{GraphError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing a tape gradient with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// `|a - c| / (|a| + |c| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Central-difference gradient of a plain scalar function.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(GraphError::invalid("finite_difference", format!("step {step} must be > 0")));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        for v in [fp, fm] {
            if !v.is_finite() {
                return Err(GraphError::NonFinite { coord: i, step, value: v });
            }
        }
        *o = (fp - fm) / (2.0 * step);
    }
    Tensor::new(x.shape(), out)
}

/// Build `f` on a fresh graph with `x` as the only gradient-carrying input,
/// backpropagate, and compare against central differences of the same
/// construction. Returns the worst coordinate-wise relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let root = f(&mut g, v)?;
        g.value(root).item()
    };

    let mut g = Graph::new();
    let v = g.input(x.clone());
    let root = f(&mut g, v)?;
    let fx = g.value(root).item()?;
    if !fx.is_finite() {
        return Err(GraphError::NonFinite { coord: 0, step: 0.0, value: fx });
    }
    let grads = g.backward(root)?;
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_gradient(eval, x, step)?;

    let (mut worst, mut worst_coord) = (0.0, 0);
    for (i, (a, c)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = relative_error(*a, *c);
        if e > worst {
            worst = e;
            worst_coord = i;
        }
    }
    Ok(FdReport {
        max_rel_error: worst,
        worst_coord,
        analytic,
        numeric,
    })
}
