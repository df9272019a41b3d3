use super::graph::{Graph, Var};
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Builds a graph with `build`, evaluates it and back-propagates from the
/// returned scalar. Returns the output value and one gradient per parameter.
pub fn forward_backward<F>(params: &ParamStore, build: F) -> Result<(Tensor, ParamStore)>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let root = build(&mut g)?;
    let grads = g.backward(root)?;
    Ok((g.value(root).clone(), grads))
}

/// Forward evaluation only.
pub fn forward<F>(params: &ParamStore, build: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let root = build(&mut g)?;
    Ok(g.value(root).clone())
}

/// Compares reverse-mode gradients with central finite differences.
///
/// Returns the maximum over every parameter entry of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(params: &ParamStore, epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::invalid(format!(
            "gradient check epsilon must be in (0, 1e-3], got {epsilon}"
        )));
    }
    let (out, analytic) = forward_backward(params, &build)?;
    if !out.is_scalar() {
        return Err(Error::NonScalarRoot(out.shape().to_vec()));
    }

    let eval = |p: &ParamStore| -> Result<f64> { Ok(forward(p, &build)?.item()) };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.require(name)?.len();
        let an = analytic.require(name)?;
        for i in 0..n {
            let orig = params.require(name)?.data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (an.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
