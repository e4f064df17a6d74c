//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorOf};

/// Denominator guard in the relative-error metric.
pub const REL_EPS: f64 = 1e-8;

/// `|a − n| / (|a| + |n| + ε)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + REL_EPS)
}

/// Maximum relative error between the tape gradient of the scalar built by `f`
/// and central differences with the given `step`, over every coordinate of `params`.
pub fn finite_difference_check<F>(f: F, params: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(params), step)
}

/// Multi-input form of [`finite_difference_check`]; every tensor in `params` is perturbed.
pub fn finite_difference_check_many<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    // Forward passes for the differences run on reference graphs, so the only
    // f32 arithmetic in the comparison is the tape gradient under test.
    let eval = |inputs: &[TensorOf<f64>]| -> Result<f64> {
        let mut g = Graph::reference();
        let vars: Vec<Var> = inputs.iter().map(|p| g.constant_f64(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.scalar_value(root))
    };

    let h = step;
    let mut worst = 0.0f64;
    let mut work: Vec<TensorOf<f64>> = params.iter().map(|p| p.cast()).collect();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi].data()[i] as f64, numeric));
        }
    }
    Ok(worst)
}
