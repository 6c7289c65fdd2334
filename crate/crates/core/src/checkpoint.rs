//! Checkpoint files: a magic line, one line of JSON metadata (configs,
//! vocabulary, tensor directory), then every tensor as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{RadError, Result};
use crate::model::{ModelConfig, Transformer};
use crate::params::ParamStore;
use crate::response_aware::{RaConfig, ResponseAware};
use crate::tensor::Tensor;
use crate::train::RadModel;
use crate::util;

const MAGIC: &str = "RADCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    store: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    ra: RaConfig,
    use_ra: bool,
    vocab: Option<Vec<String>>,
    tensors: Vec<Entry>,
}

/// A model together with the vocabulary it was trained on, if known.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: RadModel,
    pub vocab: Option<Vocabulary>,
}

pub fn to_bytes(model: &RadModel, vocab: Option<&Vocabulary>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (store, params) in [("model", &model.transformer.params), ("ra", &model.ra.params)] {
        for (name, t) in params.iter() {
            tensors.push(Entry { store: store.into(), name: name.into(), shape: t.shape().to_vec(), offset });
            offset += t.numel();
            for x in t.data() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let header = Header {
        model: model.transformer.config.clone(),
        ra: model.ra.config.clone(),
        use_ra: model.use_ra,
        vocab: vocab.map(|v| (0..v.len()).map(|i| v.token(i).unwrap_or_default().to_string()).collect()),
        tensors,
    };
    let json = serde_json::to_string(&header).map_err(|e| RadError::Checkpoint(e.to_string()))?;
    let mut out = format!("{MAGIC} {VERSION}\n{json}\n").into_bytes();
    out.extend_from_slice(&data);
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], what: &str) -> Result<(&'a str, &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| RadError::Checkpoint(format!("truncated {what}")))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| RadError::Checkpoint(format!("{what} is not UTF-8")))?;
    Ok((line, &bytes[end + 1..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (magic, rest) = take_line(bytes, "magic line")?;
    if magic != format!("{MAGIC} {VERSION}") {
        return Err(RadError::Checkpoint(format!("unrecognised header {magic:?}")));
    }
    let (json, data) = take_line(rest, "metadata")?;
    let header: Header = serde_json::from_str(json).map_err(|e| RadError::Checkpoint(e.to_string()))?;
    if data.len() % 8 != 0 {
        return Err(RadError::Checkpoint("tensor data is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut model_params = ParamStore::new();
    let mut ra_params = ParamStore::new();
    let mut expected = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| RadError::Checkpoint(format!("{} runs past the end of the data", e.name)))?;
        let t = Tensor::new(e.shape.clone(), slice.to_vec())?;
        match e.store.as_str() {
            "model" => model_params.insert(e.name.clone(), t),
            "ra" => ra_params.insert(e.name.clone(), t),
            other => return Err(RadError::Checkpoint(format!("unknown parameter group {other:?}"))),
        }
        expected += n;
    }
    if expected != values.len() {
        return Err(RadError::Checkpoint(format!(
            "directory covers {expected} values but the file holds {}",
            values.len()
        )));
    }
    let transformer = Transformer::from_parts(header.model, model_params)?;
    let ra = ResponseAware::from_parts(header.ra, transformer.config.embed_dim, ra_params)?;
    let vocab = match header.vocab {
        Some(tokens) => Some(Vocabulary::from_text(&tokens.join("\n"))?),
        None => None,
    };
    Ok(Checkpoint { model: RadModel { transformer, ra, use_ra: header.use_ra }, vocab })
}

pub fn save(path: &Path, model: &RadModel, vocab: Option<&Vocabulary>) -> Result<()> {
    util::atomic_write(path, &to_bytes(model, vocab)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| RadError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, Dialogue};

    fn model(use_ra: bool) -> RadModel {
        let cfg = ModelConfig {
            vocab_size: 10,
            embed_dim: 8,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 12,
            max_positions: 10,
            dropout_rate: 0.0,
        };
        RadModel::new(cfg, RaConfig { n_heads: 2, predictor_hidden: Some(5) }, use_ra, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(true);
        let vocab = build_vocab(
            &[Dialogue { context: vec!["a b".into()], response: "c".into() }],
            10,
        )
        .unwrap();
        let bytes = to_bytes(&m, Some(&vocab)).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.vocab.as_ref(), Some(&vocab));
        assert_eq!(to_bytes(&back.model, back.vocab.as_ref()).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(false);
        save(&path, &m, None).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.model, m);
        assert!(back.vocab.is_none());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&model(true), None).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(b"NOPE 1\n{}\n").is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&0f64.to_le_bytes());
        assert!(from_bytes(&extra).is_err());
    }
}
