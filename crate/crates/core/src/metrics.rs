//! Overlap and diversity metrics for generated responses, plus Fleiss' kappa.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};

fn bag<T: Eq + Hash>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for x in items {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

fn ngrams<T>(seq: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    let count = if n == 0 { 0 } else { (seq.len() + 1).saturating_sub(n) };
    (0..count).map(move |i| &seq[i..i + n])
}

/// Bag-of-unigrams F1 between one generated and one reference sequence.
pub fn f1_score<T: Eq + Hash>(generated: &[T], reference: &[T]) -> f64 {
    if generated.is_empty() || reference.is_empty() {
        log::warn!("f1 on an empty sequence is defined as 0");
        return 0.0;
    }
    let g = bag(generated);
    let r = bag(reference);
    let overlap: usize = g
        .iter()
        .map(|(tok, &c)| c.min(r.get(tok).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / generated.len() as f64;
    let rc = overlap as f64 / reference.len() as f64;
    2.0 * p * rc / (p + rc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub bleu1: f64,
    pub bleu2: f64,
}

/// Corpus-level BLEU-1/2 with clipped counts and a brevity penalty.
pub fn bleu<T: Eq + Hash, C: AsRef<[T]>>(candidates: &[C], references: &[C]) -> Result<Bleu> {
    if candidates.is_empty() {
        return Err(RadError::Contract("bleu needs at least one pair".into()));
    }
    if candidates.len() != references.len() {
        return Err(RadError::Contract(format!(
            "bleu got {} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 2];
    let mut total = [0usize; 2];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        let (cand, refr) = (cand.as_ref(), refr.as_ref());
        c += cand.len();
        r += refr.len();
        for n in 1..=2 {
            let cb = bag(ngrams(cand, n));
            let rb = bag(ngrams(refr, n));
            for (g, &k) in &cb {
                matched[n - 1] += k.min(rb.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c == 0 {
        return Ok(Bleu { bleu1: 0.0, bleu2: 0.0 });
    }
    let precision = |n: usize| {
        if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        }
    };
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let (p1, p2) = (precision(0), precision(1));
    Ok(Bleu {
        bleu1: bp * p1,
        bleu2: if p1 == 0.0 || p2 == 0.0 { 0.0 } else { bp * (p1 * p2).sqrt() },
    })
}

/// Unique n-grams over total n-grams, pooled across all responses.
pub fn distinct_n<T: Eq + Hash, C: AsRef<[T]>>(responses: &[C], n: usize) -> f64 {
    let all = bag(responses.iter().flat_map(|r| ngrams(r.as_ref(), n)));
    let total: usize = all.values().sum();
    if total == 0 {
        log::warn!("distinct-{n} with no {n}-grams is defined as 0");
        return 0.0;
    }
    all.len() as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub pairs: usize,
}

impl MetricsReport {
    /// Scores aligned generated/reference token sequences. F1 is averaged
    /// over pairs; BLEU and DISTINCT are corpus-level.
    pub fn compute<T: Eq + Hash, C: AsRef<[T]>>(generated: &[C], references: &[C]) -> Result<Self> {
        let b = bleu(generated, references)?;
        let f1 = generated
            .iter()
            .zip(references)
            .map(|(g, r)| f1_score(g.as_ref(), r.as_ref()))
            .sum::<f64>()
            / generated.len() as f64;
        Ok(MetricsReport {
            f1,
            bleu1: b.bleu1,
            bleu2: b.bleu2,
            distinct1: distinct_n(generated, 1),
            distinct2: distinct_n(generated, 2),
            pairs: generated.len(),
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.f1, self.bleu1, self.bleu2, self.distinct1, self.distinct2]
    }

    pub const COLUMNS: [&'static str; 5] = ["F1", "BLEU-1", "BLEU-2", "DISTINCT-1", "DISTINCT-2"];

    /// JSON with raw values and the same values scaled by 100.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("plain struct serialises");
        let obj = v.as_object_mut().expect("object");
        let scaled: serde_json::Map<String, serde_json::Value> = ["f1", "bleu1", "bleu2", "distinct1", "distinct2"]
            .iter()
            .zip(self.values())
            .map(|(k, x)| (k.to_string(), serde_json::json!(x * 100.0)))
            .collect();
        obj.insert("x100".into(), serde_json::Value::Object(scaled));
        v
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pairs: {}", self.pairs)?;
        for (name, x) in Self::COLUMNS.iter().zip(self.values()) {
            writeln!(f, "{name:<11} {x:.6}  ({:.3})", x * 100.0)?;
        }
        Ok(())
    }
}

/// Items × categories counts, each row summing to the number of raters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RaterMatrix {
    counts: Vec<Vec<usize>>,
    raters: usize,
}

impl RaterMatrix {
    pub fn new(counts: Vec<Vec<usize>>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(RadError::Contract("fleiss kappa needs at least 2 items".into()));
        }
        let cats = counts[0].len();
        if cats == 0 || counts.iter().any(|r| r.len() != cats) {
            return Err(RadError::Contract("rater matrix rows must have equal, nonzero width".into()));
        }
        let raters: usize = counts[0].iter().sum();
        if raters < 2 {
            return Err(RadError::Contract("fleiss kappa needs at least 2 raters".into()));
        }
        if let Some(i) = counts.iter().position(|r| r.iter().sum::<usize>() != raters) {
            return Err(RadError::Contract(format!(
                "item {i} has a different rater count than item 0 ({raters})"
            )));
        }
        Ok(RaterMatrix { counts, raters })
    }

    /// Reads a headerless CSV of non-negative integer counts.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| RadError::Parse { path: path.into(), line: 0, message: e.to_string() })?;
        let mut counts = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let parse_err = |message: String| RadError::Parse { path: path.into(), line: i + 1, message };
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let row = rec
                .iter()
                .map(|f| f.parse::<usize>().map_err(|e| parse_err(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            counts.push(row);
        }
        RaterMatrix::new(counts)
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn raters(&self) -> usize {
        self.raters
    }
}

pub fn fleiss_kappa(m: &RaterMatrix) -> Result<f64> {
    let n = m.raters as f64;
    let items = m.items() as f64;
    let cats = m.counts[0].len();
    let p_bar = m
        .counts
        .iter()
        .map(|row| {
            let sq: f64 = row.iter().map(|&c| (c * c) as f64).sum();
            (sq - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..cats)
        .map(|j| {
            let pj = m.counts.iter().map(|r| r[j] as f64).sum::<f64>() / (items * n);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return if (1.0 - p_bar).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(RadError::Numeric { op: "fleiss_kappa", detail: "expected agreement is 1".into() })
        };
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Landis and Koch agreement bands.
pub fn agreement_band(kappa: f64) -> &'static str {
    match kappa {
        k if k < 0.0 => "poor",
        k if k <= 0.20 => "slight",
        k if k <= 0.40 => "fair",
        k if k <= 0.60 => "moderate",
        k if k <= 0.80 => "substantial",
        _ => "almost perfect",
    }
}
