//! Decoder-only transformer over a concatenated context/response sequence.

pub mod attention;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use attention::{affine, apply_dropout, init_attention, multi_head_attention, Masking};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Set from the vocabulary when training from a corpus.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 256,
            max_positions: 128,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RadError::Config(msg));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.ff_dim == 0 {
            return bad("vocab_size, embed_dim and ff_dim must be positive".into());
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// Graph handles produced by [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `(m+n)×L` final hidden states.
    pub hidden: Var,
    /// `n×V`; row `t` scores response token `t` from the states before it.
    pub logits: Var,
    pub probs: Var,
}

/// Transformer weights plus their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, l) = (config.vocab_size, config.embed_dim);
        // Residual projections are shrunk with depth, GPT-2 style.
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("tok_emb", Tensor::randn(&[v, l], 0.02, rng));
        p.insert("pos_emb", Tensor::randn(&[config.max_positions, l], 0.01, rng));
        for layer in 0..config.n_layers {
            let pre = format!("h{layer}");
            p.insert(format!("{pre}.ln1.g"), Tensor::full(&[l], 1.0));
            p.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[l]));
            init_attention(&mut p, &format!("{pre}.attn"), l, resid_std, rng);
            p.insert(format!("{pre}.ln2.g"), Tensor::full(&[l], 1.0));
            p.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[l]));
            p.insert(format!("{pre}.ff.w1"), Tensor::randn(&[l, config.ff_dim], 0.02, rng));
            p.insert(format!("{pre}.ff.b1"), Tensor::zeros(&[config.ff_dim]));
            p.insert(format!("{pre}.ff.w2"), Tensor::randn(&[config.ff_dim, l], resid_std, rng));
            p.insert(format!("{pre}.ff.b2"), Tensor::zeros(&[l]));
        }
        p.insert("ln_f.g", Tensor::full(&[l], 1.0));
        p.insert("ln_f.b", Tensor::zeros(&[l]));
        p.insert("head.w", Tensor::randn(&[l, v], 0.02, rng));
        p.insert("head.b", Tensor::zeros(&[v]));
        Ok(Transformer { config, params: p })
    }

    /// Rebuilds a model from stored tensors, checking every expected shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let template = Transformer::new(config.clone(), &mut rng)?;
        check_same_layout(&template.params, &params)?;
        Ok(Transformer { config, params })
    }

    pub fn token_table(&self) -> &Tensor {
        self.params.get("tok_emb").expect("tok_emb always present")
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g)
    }
}

pub(crate) fn check_same_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(RadError::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    for (name, t) in expected.iter() {
        match got.get(name) {
            Some(o) if o.shape() == t.shape() => {}
            Some(o) => {
                return Err(RadError::Checkpoint(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    o.shape()
                )))
            }
            None => return Err(RadError::Checkpoint(format!("missing tensor {name}"))),
        }
    }
    Ok(())
}

/// Token embedding rows only, `len×L`; this is what fills the context and
/// response slots (positions are added inside [`forward`]).
pub fn embed_tokens(g: &mut Graph, p: &Bound, tokens: &[usize]) -> Result<Var> {
    g.gather_rows(p.get("tok_emb"), tokens)
}

/// Token plus position rows, with positions starting at `offset`.
pub fn embed(g: &mut Graph, p: &Bound, tokens: &[usize], offset: usize) -> Result<Var> {
    let tok = embed_tokens(g, p, tokens)?;
    let pos_rows = g.value(p.get("pos_emb")).rows();
    if offset + tokens.len() > pos_rows {
        return Err(RadError::Capacity {
            len: offset + tokens.len(),
            max: pos_rows,
        });
    }
    let ids: Vec<usize> = (offset..offset + tokens.len()).collect();
    let pos = g.gather_rows(p.get("pos_emb"), &ids)?;
    g.add(tok, pos)
}

/// Runs the transformer stack over an already-embedded sequence (positions
/// not yet added) and returns the final hidden states.
pub fn hidden_states(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    sequence: Var,
    mut dropout: Option<&mut (dyn RngCore + 'static)>,
) -> Result<Var> {
    let len = g.value(sequence).rows();
    if g.shape(sequence).len() != 2 || g.value(sequence).cols() != config.embed_dim {
        return Err(RadError::dim(
            "forward",
            g.shape(sequence),
            &[len, config.embed_dim],
        ));
    }
    if len > config.max_positions {
        return Err(RadError::Capacity {
            len,
            max: config.max_positions,
        });
    }
    let ids: Vec<usize> = (0..len).collect();
    let pos = g.gather_rows(p.get("pos_emb"), &ids)?;
    let mut x = g.add(sequence, pos)?;
    let rate = config.dropout_rate;

    for layer in 0..config.n_layers {
        let pre = format!("h{layer}");
        let h = g.layer_norm(
            x,
            p.get(&format!("{pre}.ln1.g")),
            p.get(&format!("{pre}.ln1.b")),
            LAYER_NORM_EPS,
        )?;
        let attn = multi_head_attention(
            g,
            p,
            &format!("{pre}.attn"),
            h,
            h,
            config.n_heads,
            Masking::Causal,
            dropout.as_deref_mut().map(|r| (rate, r)),
        )?;
        x = g.add(x, attn)?;

        let h = g.layer_norm(
            x,
            p.get(&format!("{pre}.ln2.g")),
            p.get(&format!("{pre}.ln2.b")),
            LAYER_NORM_EPS,
        )?;
        let inner = affine(g, p, h, &format!("{pre}.ff.w1"), &format!("{pre}.ff.b1"))?;
        let act = g.gelu(inner);
        let mut ff = affine(g, p, act, &format!("{pre}.ff.w2"), &format!("{pre}.ff.b2"))?;
        if let Some(r) = dropout.as_deref_mut() {
            ff = apply_dropout(g, ff, rate, r)?;
        }
        x = g.add(x, ff)?;
    }
    g.layer_norm(x, p.get("ln_f.g"), p.get("ln_f.b"), LAYER_NORM_EPS)
}

/// `softmax(h · W + b)` for a block of hidden rows.
pub fn project(g: &mut Graph, p: &Bound, hidden_rows: Var) -> Result<(Var, Var)> {
    let logits = affine(g, p, hidden_rows, "head.w", "head.b")?;
    let probs = g.softmax_rows(logits)?;
    Ok((logits, probs))
}

/// Full pass over `[context ; response]` (`m×L` and `n×L` embedding-space
/// rows). Attention is causal over the whole concatenation; the hidden
/// state at absolute position `m-1+t` yields the distribution for
/// response token `t`.
pub fn forward(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    context: Var,
    response: Var,
    dropout: Option<&mut (dyn RngCore + 'static)>,
) -> Result<ForwardOutput> {
    let m = g.value(context).rows();
    let n = g.value(response).rows();
    if m == 0 {
        return Err(RadError::Contract("forward needs a non-empty context".into()));
    }
    let sequence = g.concat_rows(&[context, response])?;
    let hidden = hidden_states(g, p, config, sequence, dropout)?;
    let rows = g.slice_rows(hidden, m - 1, m - 1 + n)?;
    let (logits, probs) = project(g, p, rows)?;
    Ok(ForwardOutput {
        hidden,
        logits,
        probs,
    })
}

/// Distribution for the token following `[context ; prefix]`, as `1×V`.
pub fn next_token(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    context: Var,
    prefix: Var,
) -> Result<(Var, Var)> {
    let m = g.value(context).rows();
    if m == 0 {
        return Err(RadError::Contract("forward needs a non-empty context".into()));
    }
    let sequence = g.concat_rows(&[context, prefix])?;
    let hidden = hidden_states(g, p, config, sequence, None)?;
    let last = g.value(hidden).rows() - 1;
    let row = g.slice_rows(hidden, last, last + 1)?;
    project(g, p, row)
}

/// Mean negative log-likelihood over unmasked positions, logs clamped at 1e-12.
pub fn nll_loss(g: &mut Graph, probs: Var, targets: &[usize], pad_mask: &[bool]) -> Result<Var> {
    g.nll(probs, targets, pad_mask)
}

#[cfg(test)]
mod tests;
