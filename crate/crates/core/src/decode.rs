//! Greedy generation and corpus evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{is_special, DialoguePair, EOS};
use crate::error::{RadError, Result};
use crate::metrics::MetricsReport;
use crate::model::{embed_tokens, next_token};
use crate::response_aware::predict_response_aware;
use crate::tensor::{Graph, Var};
use crate::train::RadModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { max_new_tokens: 32 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(RadError::Config("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// The context slot used at generation time: the predicted response-aware
/// rows for an RA model, plain token embeddings otherwise.
pub fn context_slot(g: &mut Graph, model: &RadModel, context: &[usize]) -> Result<Var> {
    let mp = model.transformer.bind(g);
    let e_x = embed_tokens(g, &mp, context)?;
    if model.use_ra {
        let rp = model.ra.bind(g);
        predict_response_aware(g, &rp, e_x)
    } else {
        Ok(e_x)
    }
}

/// Logits (`1×V`) for the first response token.
pub fn first_step_logits(model: &RadModel, context: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let slot = context_slot(&mut g, model, context)?;
    let mp = model.transformer.bind(&mut g);
    let prefix = embed_tokens(&mut g, &mp, &[])?;
    let (logits, _) = next_token(&mut g, &mp, &model.transformer.config, slot, prefix)?;
    Ok(g.value(logits).data().to_vec())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. The returned tokens include the final EOS when one was
/// produced; decoding also stops when the sequence fills `max_positions`.
pub fn generate(model: &RadModel, context: &[usize], cfg: &GenerationConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if context.is_empty() {
        return Err(RadError::Contract("cannot generate from an empty context".into()));
    }
    let max_pos = model.transformer.config.max_positions;
    if context.len() > max_pos {
        return Err(RadError::Capacity { len: context.len(), max: max_pos });
    }
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens && context.len() + out.len() <= max_pos {
        let mut g = Graph::no_grad();
        let slot = context_slot(&mut g, model, context)?;
        let mp = model.transformer.bind(&mut g);
        let prefix = embed_tokens(&mut g, &mp, &out)?;
        let (logits, _) = next_token(&mut g, &mp, &model.transformer.config, slot, prefix)?;
        let tok = argmax(g.value(logits).data());
        out.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

pub fn strip_specials(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&i| !is_special(i)).collect()
}

/// Generates for every pair and scores against the references, with
/// reserved tokens removed from both sides.
pub fn evaluate(model: &RadModel, pairs: &[DialoguePair], cfg: &GenerationConfig) -> Result<MetricsReport> {
    let mut generated = Vec::with_capacity(pairs.len());
    let mut references = Vec::with_capacity(pairs.len());
    for p in pairs {
        generated.push(strip_specials(&generate(model, &p.context, cfg)?));
        references.push(strip_specials(&p.response));
    }
    MetricsReport::compute(&generated, &references)
}
