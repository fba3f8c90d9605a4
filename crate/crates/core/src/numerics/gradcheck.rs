use super::{Bound, Graph, ParamStore, TensorError, Var};

/// Largest relative disagreement between backpropagated gradients and
/// central differences over every coordinate of every parameter.
///
/// Relative error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`;
/// a non-finite value on either side reports `f64::INFINITY`.
pub fn grad_check<F>(params: &ParamStore, h: f64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, TensorError>,
{
    assert!(h > 0.0, "step must be positive");
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    g.backward(loss)?;
    let analytic = bound.grads(&g);

    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let loss = f(&mut g, &bound)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            let err = if a.is_finite() && numeric.is_finite() {
                (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs())
            } else {
                f64::INFINITY
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
