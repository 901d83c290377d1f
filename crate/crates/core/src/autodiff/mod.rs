//! Dense arrays with reverse-mode differentiation, sized for small networks.

mod graph;
mod params;
mod tensor;

pub use graph::{ConvPadding, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: result contains NaN or Inf")]
    NonFinite { op: &'static str },
    #[error("backward was already run on this graph; call reset() first")]
    AlreadyBackpropagated,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Relative discrepancy used by the gradient checks:
/// `|analytic - numeric| / max(1e-6, |analytic| + |numeric|)`. The floor sits
/// above the round-off of an `f64` central difference, so near-zero
/// gradients are compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compares the reverse-mode gradient of a scalar function of one array with
/// central differences of step `perturbation`. Returns the largest
/// [`relative_error`] over all coordinates.
pub fn grad_check<S, F>(f: F, point: &Tensor<S>, perturbation: f64) -> Result<f64, TensorError>
where
    S: Scalar,
    F: Fn(&mut Graph<'_, S>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let x = g.var(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));
    let eval = |p: Tensor<S>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item().as_f64())
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        let mut minus = point.clone();
        let h = S::lit(perturbation);
        plus.data_mut()[i] = plus.data()[i] + h;
        minus.data_mut()[i] = minus.data()[i] - h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * perturbation);
        worst = worst.max(relative_error(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}

/// Gradient check over every coordinate of every parameter in `params`.
/// `loss` builds the scalar objective on the supplied graph.
pub fn grad_check_params<S, F>(params: &ParamStore<S>, loss: F, perturbation: f64) -> Result<GradCheckReport, TensorError>
where
    S: Scalar,
    F: Fn(&mut Graph<'_, S>) -> Result<Var, TensorError>,
{
    let analytic = {
        let mut g = Graph::with_params(params, true);
        let y = loss(&mut g)?;
        g.backward(y)?
    };
    let eval = |p: &ParamStore<S>| -> Result<f64, TensorError> {
        let mut g = Graph::with_params(p, false);
        let y = loss(&mut g)?;
        Ok(g.value(y).item().as_f64())
    };
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(grad) = analytic.get(&name) else { continue };
        let n = params.get(&name)?.len();
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            let h = S::lit(perturbation);
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * perturbation);
            let a = grad.data()[i].as_f64();
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Default, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// (parameter, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}
