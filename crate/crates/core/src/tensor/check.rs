use super::{Array, Graph, Result, Tensor};

/// Central-difference gradient of a scalar function of `x`.
pub fn numeric_gradient(mut f: impl FnMut(&Array) -> f64, x: &Array, step: f64) -> Array {
    let mut probe = x.clone();
    let mut grad = Array::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Array, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Tensor<'g>) -> Result<Tensor<'g>>,
{
    let graph = Graph::new();
    let leaf = graph.param(x.clone());
    let out = f(&graph, leaf)?;
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| Array::zeros(x.shape()));

    let mut failure = None;
    let numeric = numeric_gradient(
        |probe| {
            let g = Graph::new();
            let t = g.constant(probe.clone());
            match f(&g, t) {
                Ok(v) => v.item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        x,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max))
}
