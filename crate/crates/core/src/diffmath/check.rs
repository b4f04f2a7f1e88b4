use super::{DiffError, Graph, Tensor, Var};

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for coordinate `i`.
pub fn central_difference<F, E>(f: &F, point: &Tensor, i: usize, h: f64) -> Result<f64, E>
where
    F: Fn(&Graph, Var) -> Result<Var, E>,
{
    let eval = |delta: f64| -> Result<f64, E> {
        let mut p = point.clone();
        p.data_mut()[i] += delta;
        let g = Graph::new();
        let x = g.constant(p);
        let y = f(&g, x)?;
        Ok(g.item(y))
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over `coords` (all
/// coordinates when empty), comparing reverse-mode gradients of the scalar
/// function `f` against central differences with step `h`.
pub fn finite_diff_check<F, E>(f: F, point: &Tensor, coords: &[usize], h: f64) -> Result<f64, E>
where
    F: Fn(&Graph, Var) -> Result<Var, E>,
    E: From<DiffError>,
{
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    let analytic = g.backward(y)?.wrt(x);
    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..point.numel()).collect();
        &all
    } else {
        coords
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let a = analytic.data()[i];
        let n = central_difference(&f, point, i, h)?;
        worst = worst.max((a - n).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
