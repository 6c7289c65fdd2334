//! Response-aware network, its context-only predictor, the λ-merge, and
//! the prediction and combined losses.
//!
//! During training the attention network reads the (reconstructed) response
//! and produces a context-aligned `m×L` matrix `E_ra`. A feedforward
//! predictor estimates the same matrix from the context alone, so at
//! generation time the model can run without a response. The two are mixed
//! as `E_m = λ·E_ra + (1−λ)·E'_ra` and `E_m` replaces the context embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::model::attention::{affine, multi_head_attention, Masking};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaConfig {
    pub n_heads: usize,
    /// Predictor hidden width; `None` means twice the embedding width.
    pub predictor_hidden: Option<usize>,
}

impl Default for RaConfig {
    fn default() -> Self {
        RaConfig {
            n_heads: 4,
            predictor_hidden: None,
        }
    }
}

impl RaConfig {
    pub fn hidden_width(&self, embed_dim: usize) -> usize {
        self.predictor_hidden.unwrap_or(2 * embed_dim)
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.n_heads == 0 || !embed_dim.is_multiple_of(self.n_heads) {
            return Err(RadError::Config(format!(
                "response-aware heads {} do not divide embed_dim {embed_dim}",
                self.n_heads
            )));
        }
        if self.hidden_width(embed_dim) == 0 {
            return Err(RadError::Config("predictor_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of the response-aware network and of the predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseAware {
    pub config: RaConfig,
    pub embed_dim: usize,
    pub params: ParamStore,
}

impl ResponseAware {
    pub fn new<R: Rng + ?Sized>(config: RaConfig, embed_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate(embed_dim)?;
        let l = embed_dim;
        let hidden = config.hidden_width(l);
        let std = 1.0 / (l as f64).sqrt();
        let mut p = ParamStore::new();
        for name in ["q", "k", "v", "o"] {
            p.insert(format!("ra.attn.w{name}"), Tensor::randn(&[l, l], std, rng));
            p.insert(format!("ra.attn.b{name}"), Tensor::zeros(&[l]));
        }
        p.insert("ra.pred.w1", Tensor::randn(&[l, hidden], std, rng));
        p.insert("ra.pred.b1", Tensor::zeros(&[hidden]));
        p.insert(
            "ra.pred.w2",
            Tensor::randn(&[hidden, l], 1.0 / (hidden as f64).sqrt(), rng),
        );
        p.insert("ra.pred.b2", Tensor::zeros(&[l]));
        Ok(ResponseAware {
            config,
            embed_dim,
            params: p,
        })
    }

    pub fn from_parts(config: RaConfig, embed_dim: usize, params: ParamStore) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let template = ResponseAware::new(config.clone(), embed_dim, &mut rng)?;
        crate::model::check_same_layout(&template.params, &params)?;
        Ok(ResponseAware {
            config,
            embed_dim,
            params,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g)
    }
}

/// Graph handles for one pass of the mechanism.
#[derive(Clone, Copy, Debug)]
pub struct RaBundle {
    pub e_ra: Var,
    pub e_ra_pred: Var,
    pub e_m: Var,
    pub lambda: f64,
}

/// `E_ra`: context rows query the response rows, giving an `m×L` result.
/// No mask; the whole response is visible during training.
pub fn response_aware(
    g: &mut Graph,
    p: &Bound,
    config: &RaConfig,
    e_r: Var,
    e_x: Var,
) -> Result<Var> {
    if g.value(e_r).rows() == 0 {
        return Err(RadError::Contract(
            "response-aware attention needs at least one response row".into(),
        ));
    }
    multi_head_attention(g, p, "ra.attn", e_x, e_r, config.n_heads, Masking::None, None)
}

/// `E'_ra`: one-hidden-layer GELU network applied to each context row.
pub fn predict_response_aware(g: &mut Graph, p: &Bound, e_x: Var) -> Result<Var> {
    let hidden = affine(g, p, e_x, "ra.pred.w1", "ra.pred.b1")?;
    let act = g.gelu(hidden);
    affine(g, p, act, "ra.pred.w2", "ra.pred.b2")
}

/// `λ·E_ra + (1−λ)·E'_ra`
pub fn merge(g: &mut Graph, e_ra: Var, e_ra_pred: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RadError::Contract(format!("λ = {lambda} outside [0, 1]")));
    }
    if g.shape(e_ra) != g.shape(e_ra_pred) {
        return Err(RadError::dim("merge", g.shape(e_ra), g.shape(e_ra_pred)));
    }
    let a = g.scale(e_ra, lambda);
    let b = g.scale(e_ra_pred, 1.0 - lambda);
    g.add(a, b)
}

/// Mean squared deviation of the prediction from `E_ra`. The target is
/// detached, so this loss only trains the predictor.
pub fn ra_loss(g: &mut Graph, e_ra_pred: Var, e_ra: Var) -> Result<Var> {
    if g.shape(e_ra) != g.shape(e_ra_pred) {
        return Err(RadError::dim("ra_loss", g.shape(e_ra_pred), g.shape(e_ra)));
    }
    let target = g.detach(e_ra);
    let diff = g.sub(e_ra_pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// `γ·loss_M + (1−γ)·loss_RA`
pub fn total_loss(g: &mut Graph, loss_m: Var, loss_ra: Var, gamma: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RadError::Contract(format!("γ = {gamma} outside [0, 1]")));
    }
    let a = g.scale(loss_m, gamma);
    let b = g.scale(loss_ra, 1.0 - gamma);
    g.add(a, b)
}

/// Runs the network, the predictor and the merge in one go.
pub fn run_mechanism(
    g: &mut Graph,
    p: &Bound,
    config: &RaConfig,
    e_r: Var,
    e_x: Var,
    lambda: f64,
) -> Result<RaBundle> {
    let e_ra = response_aware(g, p, config, e_r, e_x)?;
    let e_ra_pred = predict_response_aware(g, p, e_x)?;
    let e_m = merge(g, e_ra, e_ra_pred, lambda)?;
    Ok(RaBundle {
        e_ra,
        e_ra_pred,
        e_m,
        lambda,
    })
}

/// Scalar loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_m: f64,
    pub loss_ra: f64,
    pub gamma: f64,
    pub loss_total: f64,
}

impl LossBreakdown {
    pub fn new(loss_m: f64, loss_ra: f64, gamma: f64) -> Self {
        LossBreakdown {
            loss_m,
            loss_ra,
            gamma,
            loss_total: gamma * loss_m + (1.0 - gamma) * loss_ra,
        }
    }
}
