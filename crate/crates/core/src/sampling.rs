//! Scheduled sampling adapted to a model that consumes the whole response
//! at once.
//!
//! Stage one runs a teacher-forced pass without gradients to get a
//! distribution for every response position. Stage two replaces each
//! ground-truth response embedding, independently with probability `p`, by
//! the mean embedding of that position's top-K tokens.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{RadError, Result};
use crate::model::{embed_tokens, forward, Transformer};
use crate::tensor::{Graph, Tensor, Var};

/// `p = 1 / (1 + μ / e^{l/μ})`, increasing in the 0-based epoch `l`.
pub fn replace_probability(mu: f64, epoch: usize) -> f64 {
    1.0 / (1.0 + mu / (epoch as f64 / mu).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSchedule {
    pub k: usize,
    pub mu: f64,
    pub epoch: usize,
}

impl SampleSchedule {
    pub fn new(k: usize, mu: f64, epoch: usize) -> Result<Self> {
        if k == 0 {
            return Err(RadError::Contract("K must be at least 1".into()));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(RadError::Contract(format!("μ must be positive, got {mu}")));
        }
        Ok(SampleSchedule { k, mu, epoch })
    }

    pub fn replace_probability(&self) -> f64 {
        replace_probability(self.mu, self.epoch)
    }
}

/// The `k` most probable ids, ties broken toward the lower id.
pub fn top_k_ids(probs_row: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs_row.len()).collect();
    ids.sort_by(|&a, &b| {
        probs_row[b]
            .partial_cmp(&probs_row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

/// Uniform mean of the embedding rows of the `k` most probable tokens.
pub fn candidate_embedding(probs_row: &[f64], table: &Tensor, k: usize) -> Result<Vec<f64>> {
    let v = table.rows();
    if probs_row.len() != v {
        return Err(RadError::dim("candidate_embedding", &[probs_row.len()], table.shape()));
    }
    if k == 0 || k > v {
        return Err(RadError::Contract(format!("K = {k} must lie in 1..={v}")));
    }
    let mut out = vec![0.0; table.cols()];
    for id in top_k_ids(probs_row, k) {
        for (o, e) in out.iter_mut().zip(table.row(id)) {
            *o += e;
        }
    }
    let kf = k as f64;
    out.iter_mut().for_each(|o| *o /= kf);
    Ok(out)
}

/// Output of the two-stage reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructedResponse {
    /// `n×L` rows fed to the model in place of the response embeddings.
    pub e_r: Tensor,
    pub replaced_mask: Vec<bool>,
    /// Candidate rows where replaced, zeros elsewhere.
    candidates: Tensor,
}

impl ReconstructedResponse {
    pub fn replaced_count(&self) -> usize {
        self.replaced_mask.iter().filter(|r| **r).count()
    }

    /// Builds `E_r` on a training graph from the tracked `e_y`: kept rows
    /// stay connected to the embedding table, replaced rows are constants.
    pub fn apply(&self, g: &mut Graph, e_y: Var) -> Result<Var> {
        if g.shape(e_y) != self.e_r.shape() {
            return Err(RadError::dim("reconstruct.apply", g.shape(e_y), self.e_r.shape()));
        }
        if self.replaced_count() == 0 {
            return Ok(e_y);
        }
        let cols = self.e_r.cols();
        let keep: Vec<f64> = self
            .replaced_mask
            .iter()
            .flat_map(|&r| std::iter::repeat_n(if r { 0.0 } else { 1.0 }, cols))
            .collect();
        let keep = g.constant(Tensor::new(self.e_r.shape().to_vec(), keep)?);
        let kept = g.mul(e_y, keep)?;
        let cand = g.constant(self.candidates.clone());
        g.add(kept, cand)
    }
}

/// Stage one (no gradients) plus stage two (per-position Bernoulli draws
/// from `rng`, one draw per position in order).
pub fn reconstruct<R: Rng + ?Sized>(
    model: &Transformer,
    context: &[usize],
    response: &[usize],
    sched: &SampleSchedule,
    rng: &mut R,
) -> Result<ReconstructedResponse> {
    let p = sched.replace_probability();
    reconstruct_with_probability(model, context, response, sched.k, p, rng)
}

/// [`reconstruct`] with an explicit replacement probability.
pub fn reconstruct_with_probability<R: Rng + ?Sized>(
    model: &Transformer,
    context: &[usize],
    response: &[usize],
    k: usize,
    p: f64,
    rng: &mut R,
) -> Result<ReconstructedResponse> {
    let table = model.token_table();
    if k == 0 || k > table.rows() {
        return Err(RadError::Contract(format!("K = {k} must lie in 1..={}", table.rows())));
    }
    let mut g = Graph::no_grad();
    let params = model.bind(&mut g);
    let e_x = embed_tokens(&mut g, &params, context)?;
    let e_y = embed_tokens(&mut g, &params, response)?;
    let out = forward(&mut g, &params, &model.config, e_x, e_y, None)?;

    let probs = g.value(out.probs);
    let ground_truth = g.value(e_y);
    let (n, l) = (response.len(), table.cols());
    let mut e_r = ground_truth.clone();
    let mut candidates = Tensor::zeros(&[n, l]);
    let mut replaced_mask = Vec::with_capacity(n);
    for t in 0..n {
        let u: f64 = rng.gen();
        let replace = u < p;
        if replace {
            let cand = candidate_embedding(probs.row(t), table, k)?;
            e_r.data_mut()[t * l..(t + 1) * l].copy_from_slice(&cand);
            candidates.data_mut()[t * l..(t + 1) * l].copy_from_slice(&cand);
        }
        replaced_mask.push(replace);
    }
    Ok(ReconstructedResponse {
        e_r,
        replaced_mask,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::rngs::mock::StepRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Transformer {
        let config = ModelConfig {
            vocab_size: 9,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 16,
            max_positions: 16,
            dropout_rate: 0.0,
        };
        Transformer::new(config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn probability_closed_form() {
        assert_eq!(replace_probability(4.0, 0), 0.2);
        // 1/(1 + 4/e) evaluated with mpmath at 40 digits.
        assert!((replace_probability(4.0, 4) - 0.404_609_675_191_689_67).abs() < 1e-12);
        assert!(replace_probability(4.0, 100) > 0.9999);
    }

    #[test]
    fn schedule_validation() {
        assert!(SampleSchedule::new(0, 4.0, 0).is_err());
        assert!(SampleSchedule::new(5, 0.0, 0).is_err());
        assert!(SampleSchedule::new(5, -1.0, 0).is_err());
        assert_eq!(SampleSchedule::new(5, 4.0, 0).unwrap().replace_probability(), 0.2);
    }

    #[test]
    fn candidate_examples() {
        let table = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![2.0, 4.0],
            vec![-3.0, 1.0],
            vec![0.0, 8.0],
            vec![5.0, 5.0],
        ])
        .unwrap();
        let probs = [0.1, 0.4, 0.05, 0.4, 0.05];

        assert_eq!(candidate_embedding(&probs, &table, 1).unwrap(), table.row(1));
        // Tie at 0.4 between ids 1 and 3: both kept for K=2.
        assert_eq!(candidate_embedding(&probs, &table, 2).unwrap(), vec![1.0, 6.0]);
        // Tie at 0.05 between ids 2 and 4: K=4 keeps id 2.
        assert_eq!(top_k_ids(&probs, 4), vec![1, 3, 0, 2]);

        let full = candidate_embedding(&probs, &table, 5).unwrap();
        assert!((full[0] - 1.0).abs() < 1e-12 && (full[1] - 3.6).abs() < 1e-12);

        assert!(matches!(
            candidate_embedding(&probs, &table, 6),
            Err(RadError::Contract(_))
        ));
    }

    #[test]
    fn zero_probability_keeps_ground_truth() {
        let model = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = SampleSchedule::new(3, 1e12, 0).unwrap();
        let rec = reconstruct(&model, &[1, 2, 3], &[4, 5, 6, 7], &sched, &mut rng).unwrap();
        assert_eq!(rec.replaced_count(), 0);
        let table = model.token_table();
        for (t, id) in [4, 5, 6, 7].iter().enumerate() {
            assert_eq!(rec.e_r.row(t), table.row(*id));
        }
    }

    #[test]
    fn zero_draws_replace_everything() {
        let model = toy();
        let mut rng = StepRng::new(0, 0);
        let sched = SampleSchedule::new(2, 4.0, 0).unwrap();
        let rec = reconstruct(&model, &[1, 2], &[4, 5, 6], &sched, &mut rng).unwrap();
        assert!(rec.replaced_mask.iter().all(|r| *r));
    }

    #[test]
    fn mask_follows_rng_trace() {
        const SEED: u64 = 12;
        let model = toy();
        let sched = SampleSchedule::new(2, 4.0, 3).unwrap();
        let p = sched.replace_probability();
        let response = [4, 5, 6, 7, 8, 1, 2, 3];
        let mut trace_rng = ChaCha8Rng::seed_from_u64(SEED);
        let expected: Vec<bool> = (0..response.len())
            .map(|_| trace_rng.gen::<f64>() < p)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let rec = reconstruct(&model, &[1, 2], &response, &sched, &mut rng).unwrap();
        assert_eq!(rec.replaced_mask, expected);
        assert!(expected.iter().any(|r| *r) && expected.iter().any(|r| !*r));

        // Kept rows are bit-identical to ground truth, replaced rows are candidates.
        let table = model.token_table();
        for (t, &id) in response.iter().enumerate() {
            if rec.replaced_mask[t] {
                assert_ne!(rec.e_r.row(t), table.row(id));
            } else {
                assert_eq!(rec.e_r.row(t), table.row(id));
            }
        }
    }

    #[test]
    fn apply_matches_values_and_keeps_rows_exact() {
        let model = toy();
        let sched = SampleSchedule::new(2, 4.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let response = [4, 5, 6, 7, 8];
        let rec = reconstruct(&model, &[1, 2], &response, &sched, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let e_y = embed_tokens(&mut g, &p, &response).unwrap();
        let e_r = rec.apply(&mut g, e_y).unwrap();
        assert_eq!(g.value(e_r), &rec.e_r);
    }

    #[test]
    fn replaced_fraction_converges_to_p() {
        let model = toy();
        let sched = SampleSchedule::new(2, 4.0, 2).unwrap();
        let p = sched.replace_probability();
        let response: Vec<usize> = (0..10).map(|i| 1 + i % 8).collect();
        let mut replaced = 0usize;
        let mut total = 0usize;
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rec = reconstruct(&model, &[1, 2, 3], &response, &sched, &mut rng).unwrap();
            replaced += rec.replaced_count();
            total += response.len();
        }
        assert_eq!(total, 10_000);
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        let diff = (replaced as f64 - total as f64 * p).abs();
        assert!(diff < 3.0 * sigma, "replaced {replaced}, expected {}", total as f64 * p);
    }
}
