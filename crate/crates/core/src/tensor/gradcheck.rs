//! Central finite-difference verification of analytic gradients.

use super::{Graph, Result, Tensor, Var};

/// Max over coordinates of `|analytic - central| / max(1, |central|)`.
///
/// `f` builds a scalar from the input leaf. Non-finite evaluations count as
/// an infinite error.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.param(Tensor::new(x.shape().to_vec(), data.to_vec())?);
        let out = f(&mut g, xv)?;
        Ok(g.value(out).item())
    };
    let coords: Vec<usize> = (0..x.numel()).collect();
    compare_central(&analytic, x.data(), eval, step, &coords)
}

/// Compares `analytic` against central differences of `eval` at the chosen
/// coordinates of `point`.
pub fn compare_central<E>(
    analytic: &[f64],
    point: &[f64],
    eval: E,
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    E: Fn(&[f64]) -> Result<f64>,
{
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = eval(&probe);
        probe[i] = orig - step;
        let down = eval(&probe);
        probe[i] = orig;
        let err = match (up, down) {
            (Ok(u), Ok(d)) if u.is_finite() && d.is_finite() => {
                let numeric = (u - d) / (2.0 * step);
                let a = analytic[i];
                if a.is_finite() {
                    (a - numeric).abs() / numeric.abs().max(1.0)
                } else {
                    f64::INFINITY
                }
            }
            _ => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    Ok(worst)
}
