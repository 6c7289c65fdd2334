use super::{Graph, Tensor, Var};
use crate::error::{RadError, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` builds the function on the supplied graph from the leaf variables
/// bound to `params` (in order). Returns the maximum over every coordinate
/// of `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(RadError::Contract(format!(
            "finite-difference step {h} outside [1e-6, 1e-3]"
        )));
    }

    let mut graph = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| graph.leaf(&p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut graph, &vars)?;
    if graph.value(out).numel() != 1 {
        return Err(RadError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            graph.shape(out)
        )));
    }
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            graph
                .grad(*v)
                .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vs: Vec<Var> = perturbed.iter().map(|p| g.leaf(p)).collect();
        let o = f(&mut g, &vs)?;
        Ok(g.value(o).item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &ad) in grads.iter().enumerate() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
