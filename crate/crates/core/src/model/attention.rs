use rand::RngCore;

use crate::error::{RadError, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Adds `{prefix}.w{q,k,v,o}` (L×L) and matching biases to `store`.
pub fn init_attention<R: rand::Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    out_std: f64,
    rng: &mut R,
) {
    for name in ["q", "k", "v"] {
        store.insert(format!("{prefix}.w{name}"), Tensor::randn(&[dim, dim], 0.02, rng));
        store.insert(format!("{prefix}.b{name}"), Tensor::zeros(&[dim]));
    }
    store.insert(format!("{prefix}.wo"), Tensor::randn(&[dim, dim], out_std, rng));
    store.insert(format!("{prefix}.bo"), Tensor::zeros(&[dim]));
}

/// How the score matrix is masked before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Masking {
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Every query sees every key.
    None,
}

/// Multi-head scaled dot-product attention with output projection.
///
/// `query_src` is r×L, `kv_src` is s×L, and the result is r×L. When
/// `dropout` is given, attention weights are dropped with probability `rate`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    query_src: Var,
    kv_src: Var,
    n_heads: usize,
    masking: Masking,
    dropout: Option<(f64, &mut (dyn RngCore + 'static))>,
) -> Result<Var> {
    let dim = g.value(query_src).cols();
    if g.value(kv_src).cols() != dim {
        return Err(RadError::dim("attention", g.shape(query_src), g.shape(kv_src)));
    }
    if n_heads == 0 || !dim.is_multiple_of(n_heads) {
        return Err(RadError::Contract(format!(
            "embedding width {dim} not divisible by {n_heads} heads"
        )));
    }
    let head_dim = dim / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = affine(g, p, query_src, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = affine(g, p, kv_src, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = affine(g, p, kv_src, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;

    let mut dropout = dropout;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let mut scores = g.scale(raw, scale);
        if masking == Masking::Causal {
            scores = g.causal_mask(scores, 0)?;
        }
        let mut weights = g.softmax_rows(scores)?;
        if let Some((rate, rng)) = dropout.as_mut() {
            weights = apply_dropout(g, weights, *rate, &mut **rng)?;
        }
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = g.concat_cols(&heads)?;
    affine(g, p, joined, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// `x · W + b`
pub fn affine(g: &mut Graph, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let xw = g.matmul(x, p.get(w))?;
    g.add_row(xw, p.get(b))
}

/// Inverted dropout; a no-op when `rate` is zero.
pub fn apply_dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut (dyn RngCore + 'static)) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let n = g.value(x).numel();
    let mask = (0..n)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            if u < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    g.dropout_with_mask(x, mask)
}
