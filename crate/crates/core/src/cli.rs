//! The `rad` command line.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Dialogue, SyntheticSpec, Vocabulary};
use crate::decode::{generate, GenerationConfig};
use crate::error::{RadError, Result};
use crate::metrics::{agreement_band, fleiss_kappa, MetricsReport, RaterMatrix};
use crate::train::{run_ablation, run_training, stream_rng, Stream};
use crate::util;

#[derive(Parser, Debug)]
#[command(name = "rad", version, about = "Response-aware dialogue model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a setting, e.g. `--set train.lr=0.001` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Random seed; overrides `train.seed`
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model variant and write checkpoints and a report
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Generate responses for a JSONL file of contexts
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = GenerationConfig::default().max_new_tokens)]
        max_new_tokens: usize,
        /// Accepted for uniformity; greedy decoding draws no random numbers
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score generated responses against references
    Evaluate {
        /// JSONL with `reference` (or `response`) and `generated` fields
        #[arg(long)]
        input: Option<PathBuf>,
        /// Separate JSONL file of generated responses
        #[arg(long, requires = "reference")]
        generated: Option<PathBuf>,
        /// Separate JSONL file of reference responses
        #[arg(long, requires = "generated")]
        reference: Option<PathBuf>,
        /// Generate missing responses with this model
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Items × categories rating counts, for Fleiss' kappa
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Write the report as JSON here
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = GenerationConfig::default().max_new_tokens)]
        max_new_tokens: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate base, +SS, +RA and +SS+RA
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Read a context per line from stdin and print a response
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = GenerationConfig::default().max_new_tokens)]
        max_new_tokens: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a seeded copy-task corpus (response = reversed context)
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        alphabet: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
    },
}

/// 2 for configuration, input and usage problems, 3 for a numeric abort.
pub fn exit_code(e: &RadError) -> i32 {
    match e {
        RadError::NonFinite { .. } | RadError::Numeric { .. } => 3,
        RadError::Config(_) | RadError::Parse { .. } | RadError::Io { .. } | RadError::Checkpoint(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => cmd_train(&cfg.resolve()?, &out),
        Command::Generate { checkpoint, input, output, max_new_tokens, .. } => {
            cmd_generate(&checkpoint, &input, &output, &GenerationConfig { max_new_tokens })
        }
        Command::Evaluate { input, generated, reference, checkpoint, ratings, output, max_new_tokens, .. } => {
            let sources = match (input, generated, reference) {
                (Some(i), None, None) => EvalSource::Combined(i),
                (None, Some(g), Some(r)) => EvalSource::Split(g, r),
                _ => return Err(RadError::Config("give either --input or --generated with --reference".into())),
            };
            cmd_evaluate(
                &sources,
                checkpoint.as_deref(),
                ratings.as_deref(),
                output.as_deref(),
                &GenerationConfig { max_new_tokens },
                stdout,
            )
        }
        Command::Ablate { cfg, out } => cmd_ablate(&cfg.resolve()?, &out, stdout),
        Command::Chat { checkpoint, max_new_tokens, .. } => {
            cmd_chat(&checkpoint, &GenerationConfig { max_new_tokens }, stdin, stdout)
        }
        Command::MakeSynthetic { out, pairs, seed, alphabet, min_len, max_len } => {
            let spec = SyntheticSpec { pairs, alphabet, min_len, max_len };
            let dialogues = data::make_synthetic(&spec, &mut stream_rng(seed, Stream::Synthetic))?;
            data::save_corpus(&out, &dialogues)?;
            eprintln!("wrote {} pairs to {}", dialogues.len(), out.display());
            Ok(())
        }
    }
}

fn io_err(e: std::io::Error) -> RadError {
    RadError::io("<stdio>", e)
}

/// Loads the vocabulary named in the config, or builds one from `train`
/// capped at `model.vocab_size`; the model's vocabulary size is then set
/// to match.
fn prepare_vocab(cfg: &mut RunConfig, train: &[Dialogue]) -> Result<Vocabulary> {
    let vocab = match &cfg.data.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => data::build_vocab(train, cfg.model.vocab_size)?,
    };
    cfg.model.vocab_size = vocab.len();
    Ok(vocab)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| RadError::Config(format!("{key} is not set")))
}

fn load_pairs(path: &Path, vocab: &Vocabulary, max_positions: usize) -> Result<Vec<data::DialoguePair>> {
    let corpus = data::load_corpus(path)?;
    data::encode_corpus(vocab, &corpus.dialogues, max_positions)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    let train_path = required(&cfg.data.train, "data.train")?.to_path_buf();
    let corpus = data::load_corpus(&train_path)?;
    let vocab = prepare_vocab(&mut cfg, &corpus.dialogues)?;
    let pairs = data::encode_corpus(&vocab, &corpus.dialogues, cfg.model.max_positions)?;
    std::fs::create_dir_all(out).map_err(|e| RadError::io(out, e))?;
    util::atomic_write(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    vocab.save(&out.join("vocab.txt"))?;

    let every = cfg.train.checkpoint_every;
    let last = cfg.train.epochs - 1;
    let (model, report) = run_training(&pairs, &cfg.model, &cfg.ra, &cfg.train, &mut |epoch, model| {
        if every > 0 && epoch != last && (epoch + 1) % every == 0 {
            checkpoint::save(&out.join(format!("epoch-{epoch}.ckpt")), model, Some(&vocab))?;
        }
        Ok(())
    })?;
    checkpoint::save(&out.join("model.ckpt"), &model, Some(&vocab))?;
    util::atomic_write(&out.join("report.jsonl"), report.to_jsonl()?.as_bytes())?;
    eprintln!(
        "trained {} for {} steps in {:.1}s; outputs in {}",
        report.variant,
        report.total_steps,
        report.wall_seconds,
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(crate::train::RadModel, Vocabulary)> {
    let ck = checkpoint::load(path)?;
    let vocab = ck
        .vocab
        .ok_or_else(|| RadError::Checkpoint(format!("{} carries no vocabulary", path.display())))?;
    Ok((ck.model, vocab))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Text {
    One(String),
    Turns(Vec<String>),
}

impl Text {
    fn turns(&self) -> Vec<String> {
        match self {
            Text::One(s) => vec![s.clone()],
            Text::Turns(v) => v.clone(),
        }
    }
}

#[derive(Deserialize)]
struct EvalLine {
    #[serde(default)]
    context: Option<Text>,
    #[serde(default, alias = "response")]
    reference: Option<String>,
    #[serde(default)]
    generated: Option<String>,
}

#[derive(Serialize)]
struct GeneratedLine<'a> {
    context: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<&'a str>,
    generated: String,
}

fn read_eval_lines(path: &Path) -> Result<Vec<EvalLine>> {
    let text = util::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RadError::Parse { path: path.into(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

fn respond(model: &crate::train::RadModel, vocab: &Vocabulary, turns: &[String], gen: &GenerationConfig) -> Result<String> {
    let mut ctx = data::encode_context(vocab, turns);
    let max = model.transformer.config.max_positions;
    if ctx.len() >= max {
        ctx.drain(..ctx.len() + 1 - max);
    }
    Ok(vocab.decode(&generate(model, &ctx, gen)?))
}

pub fn cmd_generate(checkpoint: &Path, input: &Path, output: &Path, gen: &GenerationConfig) -> Result<()> {
    gen.validate()?;
    let (model, vocab) = load_model(checkpoint)?;
    let lines = read_eval_lines(input)?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        let turns = l
            .context
            .as_ref()
            .map(Text::turns)
            .ok_or_else(|| RadError::Parse { path: input.into(), line: i + 1, message: "missing context".into() })?;
        let generated = respond(&model, &vocab, &turns, gen)?;
        out.push(serde_json::to_string(&GeneratedLine { context: &turns, reference: l.reference.as_deref(), generated })
            .map_err(|e| RadError::Contract(e.to_string()))?);
    }
    let mut text = out.join("\n");
    text.push('\n');
    util::atomic_write(output, text.as_bytes())?;
    eprintln!("wrote {} responses to {}", lines.len(), output.display());
    Ok(())
}

pub enum EvalSource {
    Combined(PathBuf),
    Split(PathBuf, PathBuf),
}

fn first_text(l: &EvalLine) -> Option<&str> {
    l.generated.as_deref().or(l.reference.as_deref())
}

pub fn cmd_evaluate(
    source: &EvalSource,
    checkpoint: Option<&Path>,
    ratings: Option<&Path>,
    output: Option<&Path>,
    gen: &GenerationConfig,
    stdout: &mut dyn Write,
) -> Result<()> {
    let (generated, references): (Vec<String>, Vec<String>) = match source {
        EvalSource::Split(g, r) => {
            let g = read_eval_lines(g)?;
            let r = read_eval_lines(r)?;
            if g.len() != r.len() {
                return Err(RadError::Config(format!("{} generated lines but {} references", g.len(), r.len())));
            }
            let pick = |ls: &[EvalLine], path: &Path| -> Result<Vec<String>> {
                ls.iter()
                    .enumerate()
                    .map(|(i, l)| {
                        first_text(l).map(str::to_owned).ok_or_else(|| RadError::Parse {
                            path: path.into(),
                            line: i + 1,
                            message: "no generated, reference or response field".into(),
                        })
                    })
                    .collect()
            };
            let (gp, rp) = match source {
                EvalSource::Split(a, b) => (a, b),
                EvalSource::Combined(_) => unreachable!(),
            };
            (pick(&g, gp)?, pick(&r, rp)?)
        }
        EvalSource::Combined(path) => {
            let lines = read_eval_lines(path)?;
            let model = checkpoint.map(load_model).transpose()?;
            let mut gs = Vec::new();
            let mut rs = Vec::new();
            for (i, l) in lines.iter().enumerate() {
                let err = |m: &str| RadError::Parse { path: path.clone(), line: i + 1, message: m.into() };
                let reference = l.reference.clone().ok_or_else(|| err("missing reference"))?;
                let g = match (&l.generated, &model) {
                    (Some(g), _) => g.clone(),
                    (None, Some((m, v))) => {
                        let turns = l.context.as_ref().map(Text::turns).ok_or_else(|| err("missing context"))?;
                        respond(m, v, &turns, gen)?
                    }
                    (None, None) => return Err(err("missing generated (pass --checkpoint to generate)")),
                };
                gs.push(g);
                rs.push(reference);
            }
            (gs, rs)
        }
    };
    let tok = |v: &[String]| -> Vec<Vec<String>> {
        v.iter()
            .map(|s| data::tokenize(s).into_iter().filter(|t| !data::RESERVED.contains(t)).map(str::to_owned).collect())
            .collect()
    };
    let report = MetricsReport::compute(&tok(&generated), &tok(&references))?;
    write!(stdout, "{report}").map_err(io_err)?;
    let mut json = report.to_json();
    if let Some(r) = ratings {
        let kappa = fleiss_kappa(&RaterMatrix::from_csv(r)?)?;
        writeln!(stdout, "fleiss_kappa {kappa:.6} ({})", agreement_band(kappa)).map_err(io_err)?;
        json["fleiss_kappa"] = serde_json::json!(kappa);
        json["agreement"] = serde_json::json!(agreement_band(kappa));
    }
    if let Some(o) = output {
        let mut text = serde_json::to_string_pretty(&json).map_err(|e| RadError::Contract(e.to_string()))?;
        text.push('\n');
        util::atomic_write(o, text.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = cfg.clone();
    let train_path = required(&cfg.data.train, "data.train")?.to_path_buf();
    let test_path = required(&cfg.data.test, "data.test")?.to_path_buf();
    let corpus = data::load_corpus(&train_path)?;
    let vocab = prepare_vocab(&mut cfg, &corpus.dialogues)?;
    let train = data::encode_corpus(&vocab, &corpus.dialogues, cfg.model.max_positions)?;
    let test = load_pairs(&test_path, &vocab, cfg.model.max_positions)?;
    let report = run_ablation(&train, &test, &cfg.model, &cfg.ra, &cfg.train, &cfg.generation)?;

    std::fs::create_dir_all(out).map_err(|e| RadError::io(out, e))?;
    util::atomic_write(&out.join("ablation.jsonl"), report.to_jsonl()?.as_bytes())?;
    util::atomic_write(&out.join("ablation.txt"), report.table().as_bytes())?;
    for row in &report.rows {
        let name = format!("report-{}.jsonl", row.variant.to_string().trim_start_matches('+').replace('+', "-").to_lowercase());
        util::atomic_write(&out.join(name), row.report.to_jsonl()?.as_bytes())?;
        eprintln!("{}: {:.1}s", row.variant, row.report.wall_seconds);
    }
    write!(stdout, "{}", report.table()).map_err(io_err)?;
    Ok(())
}

pub fn cmd_chat(checkpoint: &Path, gen: &GenerationConfig, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<()> {
    gen.validate()?;
    let (model, vocab) = load_model(checkpoint)?;
    let mut line = String::new();
    loop {
        line.clear();
        if stdin.read_line(&mut line).map_err(io_err)? == 0 {
            return Ok(());
        }
        let turn = line.trim();
        if turn.is_empty() {
            continue;
        }
        let reply = respond(&model, &vocab, &[turn.to_string()], gen)?;
        writeln!(stdout, "{reply}").map_err(io_err)?;
        stdout.flush().map_err(io_err)?;
    }
}
