//! Training engine: per-batch loss assembly for the four variants, Adam,
//! the λ schedule, per-epoch reports and the ablation grid.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_batches, Batch, DialoguePair};
use crate::decode::{evaluate, GenerationConfig};
use crate::error::{RadError, Result};
use crate::metrics::MetricsReport;
use crate::model::{embed_tokens, forward, nll_loss, ModelConfig, Transformer};
use crate::params::{Bound, ParamStore};
use crate::response_aware::{ra_loss, run_mechanism, total_loss, LossBreakdown, RaConfig, ResponseAware};
use crate::sampling::{reconstruct, ReconstructedResponse, SampleSchedule};
use crate::tensor::{Graph, Var};

/// Independent random streams derived from one seed, so that switching a
/// mechanism on never shifts the draws another component sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    ModelInit = 0,
    RaInit = 1,
    DataOrder = 2,
    Sampling = 3,
    Dropout = 4,
    Synthetic = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Transformer plus the response-aware pair. `use_ra` selects which
/// context representation generation feeds the transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct RadModel {
    pub transformer: Transformer,
    pub ra: ResponseAware,
    pub use_ra: bool,
}

impl RadModel {
    pub fn new(model: ModelConfig, ra: RaConfig, use_ra: bool, seed: u64) -> Result<Self> {
        ra.validate(model.embed_dim)?;
        let transformer = Transformer::new(model, &mut stream_rng(seed, Stream::ModelInit))?;
        let ra = ResponseAware::new(ra, transformer.config.embed_dim, &mut stream_rng(seed, Stream::RaInit))?;
        Ok(RadModel { transformer, ra, use_ra })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub mu: f64,
    pub k: usize,
    pub lambda_floor: f64,
    pub use_ss: bool,
    pub use_ra: bool,
    pub seed: u64,
    /// Also checkpoint every this many epochs; 0 keeps only the final model.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 16,
            epochs: 10,
            gamma: 0.5,
            mu: 4.0,
            k: 5,
            lambda_floor: 0.2,
            use_ss: true,
            use_ra: true,
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RadError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda_floor) {
            return bad(format!("lambda_floor must lie in [0, 1], got {}", self.lambda_floor));
        }
        if !(self.mu >= 1.0 && self.mu.is_finite()) {
            return bad(format!("mu must be at least 1, got {}", self.mu));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        match (self.use_ss, self.use_ra) {
            (false, false) => Variant::Base,
            (true, false) => Variant::Ss,
            (false, true) => Variant::Ra,
            (true, true) => Variant::SsRa,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Base,
    Ss,
    Ra,
    SsRa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Ss, Variant::Ra, Variant::SsRa];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Base => (false, false),
            Variant::Ss => (true, false),
            Variant::Ra => (false, true),
            Variant::SsRa => (true, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Ss => "+SS",
            Variant::Ra => "+RA",
            Variant::SsRa => "+SS+RA",
        })
    }
}

/// λ falls linearly from 1 to the floor over the first epoch's steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub first_epoch_steps: usize,
    pub floor: f64,
}

impl LambdaSchedule {
    pub fn new(first_epoch_steps: usize, floor: f64) -> Result<Self> {
        if first_epoch_steps == 0 || !(0.0..=1.0).contains(&floor) {
            return Err(RadError::Contract(format!(
                "λ schedule needs S₁ ≥ 1 and a floor in [0, 1], got {first_epoch_steps}, {floor}"
            )));
        }
        Ok(LambdaSchedule { first_epoch_steps, floor })
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        if step >= self.first_epoch_steps {
            return self.floor;
        }
        1.0 - (1.0 - self.floor) * step as f64 / self.first_epoch_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam step at 1-based step `t`.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    t: usize,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() {
        return Err(RadError::dim("adam_update", &[param.len()], &[grad.len()]));
    }
    if t == 0 {
        return Err(RadError::Contract("Adam steps are 1-based".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(RadError::Numeric {
            op: "adam_update",
            detail: format!("gradient entry {i} is {}", grad[i]),
        });
    }
    if state.m.len() != param.len() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over named tensors, one moment pair per tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: usize,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0, state: BTreeMap::new() }
    }

    pub fn step(&mut self, stores: &mut [&mut ParamStore]) -> Result<()> {
        self.t += 1;
        for store in stores.iter_mut() {
            for (name, tensor) in store.iter_mut() {
                let state = self.state.entry(name.to_string()).or_default();
                let (data, grad) = tensor.data_and_grad();
                if let Some(grad) = grad {
                    adam_update(data, grad, state, self.t, &self.config)?;
                }
            }
        }
        Ok(())
    }
}

/// Per-step knobs for assembling the loss of one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub use_ra: bool,
    pub lambda: f64,
    pub gamma: f64,
}

/// Graph handles for the loss of one pair; `loss_ra` is absent without RA.
#[derive(Clone, Copy, Debug)]
pub struct PairLoss {
    pub total: Var,
    pub loss_m: Var,
    pub loss_ra: Option<Var>,
}

/// Builds the training loss of one unpadded pair. With RA, the merged
/// context representation replaces `E_x` and the two losses are mixed by
/// γ; without RA the loss is the language-model loss alone.
#[allow(clippy::too_many_arguments)]
pub fn pair_loss(
    g: &mut Graph,
    model_params: &Bound,
    ra_params: &Bound,
    model_cfg: &ModelConfig,
    ra_cfg: &RaConfig,
    pair: &DialoguePair,
    recon: Option<&ReconstructedResponse>,
    settings: LossSettings,
    dropout: Option<&mut (dyn rand::RngCore + 'static)>,
) -> Result<PairLoss> {
    let e_x = embed_tokens(g, model_params, &pair.context)?;
    let e_y = embed_tokens(g, model_params, &pair.response)?;
    let e_r = match recon {
        Some(r) => r.apply(g, e_y)?,
        None => e_y,
    };
    let mask = vec![true; pair.response.len()];
    if settings.use_ra {
        let bundle = run_mechanism(g, ra_params, ra_cfg, e_r, e_x, settings.lambda)?;
        let out = forward(g, model_params, model_cfg, bundle.e_m, e_r, dropout)?;
        let loss_m = nll_loss(g, out.probs, &pair.response, &mask)?;
        let loss_ra = ra_loss(g, bundle.e_ra_pred, bundle.e_ra)?;
        let total = total_loss(g, loss_m, loss_ra, settings.gamma)?;
        Ok(PairLoss { total, loss_m, loss_ra: Some(loss_ra) })
    } else {
        let out = forward(g, model_params, model_cfg, e_x, e_r, dropout)?;
        let loss_m = nll_loss(g, out.probs, &pair.response, &mask)?;
        Ok(PairLoss { total: loss_m, loss_m, loss_ra: None })
    }
}

/// Mutable state of one training run.
pub struct Trainer {
    pub model: RadModel,
    pub config: TrainConfig,
    pub lambda: LambdaSchedule,
    pub adam: Adam,
    pub step: usize,
    sampling_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: RadModel, config: TrainConfig, first_epoch_steps: usize) -> Result<Self> {
        config.validate()?;
        if model.use_ra != config.use_ra {
            return Err(RadError::Contract("model and config disagree on use_ra".into()));
        }
        Ok(Trainer {
            lambda: LambdaSchedule::new(first_epoch_steps, config.lambda_floor)?,
            adam: Adam::new(AdamConfig::with_lr(config.lr)),
            step: 0,
            sampling_rng: stream_rng(config.seed, Stream::Sampling),
            dropout_rng: stream_rng(config.seed, Stream::Dropout),
            model,
            config,
        })
    }

    /// Forward, backward and one Adam update on `batch`; the batch loss is
    /// the mean of the per-pair losses.
    pub fn train_step(&mut self, batch: &Batch, epoch: usize, batch_index: usize) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(RadError::Contract("empty batch".into()));
        }
        let cfg = &self.config;
        let sched = SampleSchedule::new(cfg.k, cfg.mu, epoch)?;
        let settings = LossSettings {
            use_ra: cfg.use_ra,
            lambda: self.lambda.lambda_at(self.step),
            gamma: if cfg.use_ra { cfg.gamma } else { 1.0 },
        };
        let pairs: Vec<DialoguePair> = (0..batch.len()).map(|i| batch.pair(i)).collect();

        let recons = if cfg.use_ss {
            pairs
                .iter()
                .map(|p| {
                    reconstruct(&self.model.transformer, &p.context, &p.response, &sched, &mut self.sampling_rng)
                        .map(Some)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; pairs.len()]
        };

        let mut g = Graph::new();
        let mp = self.model.transformer.bind(&mut g);
        let rp = if cfg.use_ra { self.model.ra.bind(&mut g) } else { Bound::default() };
        let use_dropout = self.model.transformer.config.dropout_rate > 0.0;
        let mut totals = Vec::with_capacity(pairs.len());
        let (mut sum_m, mut sum_ra) = (0.0, 0.0);
        for (pair, recon) in pairs.iter().zip(&recons) {
            let dropout: Option<&mut (dyn rand::RngCore + 'static)> =
                if use_dropout { Some(&mut self.dropout_rng) } else { None };
            let l = pair_loss(
                &mut g,
                &mp,
                &rp,
                &self.model.transformer.config,
                &self.model.ra.config,
                pair,
                recon.as_ref(),
                settings,
                dropout,
            )?;
            sum_m += g.value(l.loss_m).item();
            sum_ra += l.loss_ra.map_or(0.0, |v| g.value(v).item());
            totals.push(l.total);
        }
        let mut loss = totals[0];
        for &t in &totals[1..] {
            loss = g.add(loss, t)?;
        }
        let loss = g.scale(loss, 1.0 / totals.len() as f64);
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(RadError::NonFinite { what: "loss", step: self.step, batch_index, max_abs_grad: f64::NAN });
        }
        g.backward(loss)?;

        let model = &mut self.model;
        model.transformer.params.zero_grad();
        model.transformer.params.accumulate_grads(&g, &mp)?;
        let mut stores: Vec<&mut ParamStore> = vec![&mut model.transformer.params];
        if cfg.use_ra {
            model.ra.params.zero_grad();
            model.ra.params.accumulate_grads(&g, &rp)?;
            stores.push(&mut model.ra.params);
        }
        let max_abs_grad = stores.iter().map(|s| s.max_abs_grad()).fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) });
        if !max_abs_grad.is_finite() {
            return Err(RadError::NonFinite { what: "gradient", step: self.step, batch_index, max_abs_grad });
        }
        self.adam.step(&mut stores)?;
        if stores.iter().any(|s| !s.all_finite()) {
            return Err(RadError::NonFinite { what: "parameter", step: self.step, batch_index, max_abs_grad });
        }
        self.step += 1;

        let n = pairs.len() as f64;
        let (loss_m, loss_ra) = (sum_m / n, sum_ra / n);
        Ok(LossBreakdown { loss_m, loss_ra, gamma: settings.gamma, loss_total: loss_value })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub p: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub gamma: f64,
    pub loss_m: f64,
    pub loss_ra: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub total_steps: usize,
    /// Not written to the report file, which must be reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine<'a> {
    Epoch(&'a EpochRecord),
    Summary {
        variant: String,
        seed: u64,
        total_steps: usize,
        final_loss_total: f64,
    },
}

impl TrainReport {
    /// One JSON line per epoch, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut lines: Vec<ReportLine> = self.epochs.iter().map(ReportLine::Epoch).collect();
        lines.push(ReportLine::Summary {
            variant: self.variant.to_string(),
            seed: self.seed,
            total_steps: self.total_steps,
            final_loss_total: self.epochs.last().map_or(f64::NAN, |e| e.loss_total),
        });
        crate::util::to_jsonl(&lines)
    }
}

/// Trains from scratch. `on_epoch` sees the model after every epoch (for
/// checkpointing) along with the 0-based epoch index.
pub fn run_training(
    pairs: &[DialoguePair],
    model_cfg: &ModelConfig,
    ra_cfg: &RaConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &RadModel) -> Result<()>,
) -> Result<(RadModel, TrainReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(RadError::Contract("training corpus is empty".into()));
    }
    let model = RadModel::new(model_cfg.clone(), ra_cfg.clone(), cfg.use_ra, cfg.seed)?;
    let first_epoch_steps = pairs.len().div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(model, cfg.clone(), first_epoch_steps)?;
    let mut data_rng = stream_rng(cfg.seed, Stream::DataOrder);
    let started = Instant::now();
    let mut epochs = Vec::new();

    'outer: for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(pairs, cfg.batch_size, &mut data_rng);
        let lambda_start = trainer.lambda.lambda_at(trainer.step);
        let mut lambda_end = lambda_start;
        let (mut sm, mut sr, mut st, mut steps) = (0.0, 0.0, 0.0, 0usize);
        let mut gamma = 1.0;
        for (bi, batch) in batches.iter().enumerate() {
            if cfg.max_steps.is_some_and(|m| trainer.step >= m) {
                break;
            }
            lambda_end = trainer.lambda.lambda_at(trainer.step);
            let b = trainer.train_step(batch, epoch, bi)?;
            sm += b.loss_m;
            sr += b.loss_ra;
            st += b.loss_total;
            gamma = b.gamma;
            steps += 1;
        }
        if steps == 0 {
            break 'outer;
        }
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            steps,
            p: crate::sampling::replace_probability(cfg.mu, epoch),
            lambda_start,
            lambda_end,
            gamma,
            loss_m: sm / n,
            loss_ra: sr / n,
            loss_total: st / n,
        };
        log::info!(
            "{} epoch {epoch}: loss_M {:.5} loss_RA {:.5} total {:.5} ({:.1}s)",
            cfg.variant(),
            record.loss_m,
            record.loss_ra,
            record.loss_total,
            started.elapsed().as_secs_f64()
        );
        epochs.push(record);
        on_epoch(epoch, &trainer.model)?;
    }

    let report = TrainReport {
        variant: cfg.variant(),
        seed: cfg.seed,
        total_steps: trainer.step,
        epochs,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((trainer.model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: MetricsReport,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Set when +RA falls below base on F1 or BLEU-1.
    pub flagged: bool,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> &AblationRow {
        self.rows.iter().find(|r| r.variant == v).expect("all variants present")
    }

    /// Text table: one row per variant, one column per metric (×100).
    pub fn table(&self) -> String {
        let mut s = format!("{:<8}", "model");
        for c in MetricsReport::COLUMNS {
            s.push_str(&format!(" {c:>10}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<8}", r.variant.to_string()));
            for x in r.metrics.values() {
                s.push_str(&format!(" {:>10.3}", x * 100.0));
            }
            s.push('\n');
        }
        if self.flagged {
            s.push_str("FLAGGED: +RA is below base on F1 or BLEU-1\n");
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = r.metrics.to_json();
                v["variant"] = serde_json::json!(r.variant.to_string());
                v["final_loss_total"] = serde_json::json!(r.report.epochs.last().map(|e| e.loss_total));
                v
            })
            .collect();
        let mut out = crate::util::to_jsonl(&rows)?;
        out.push_str(&serde_json::json!({ "flagged": self.flagged }).to_string());
        out.push('\n');
        Ok(out)
    }
}

/// Trains and evaluates all four variants with the same seed and data
/// order, one thread per variant.
pub fn run_ablation(
    train: &[DialoguePair],
    test: &[DialoguePair],
    model_cfg: &ModelConfig,
    ra_cfg: &RaConfig,
    base: &TrainConfig,
    gen: &GenerationConfig,
) -> Result<AblationReport> {
    if test.is_empty() {
        return Err(RadError::Contract("ablation needs a non-empty test set".into()));
    }
    let results: Vec<Result<AblationRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = Variant::ALL
            .iter()
            .map(|&variant| {
                s.spawn(move || -> Result<AblationRow> {
                    let (use_ss, use_ra) = variant.flags();
                    let cfg = TrainConfig { use_ss, use_ra, ..base.clone() };
                    let (model, report) = run_training(train, model_cfg, ra_cfg, &cfg, &mut |_, _| Ok(()))?;
                    let metrics = evaluate(&model, test, gen)?;
                    Ok(AblationRow { variant, metrics, report })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut report = AblationReport { rows, flagged: false };
    let (b, r) = (&report.row(Variant::Base).metrics, &report.row(Variant::Ra).metrics);
    report.flagged = r.f1 < b.f1 || r.bleu1 < b.bleu1;
    Ok(report)
}

#[cfg(test)]
mod tests;
