//! Corpus ingestion, word-level vocabulary, encoding and batching.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::util;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<sep>", "<eos>", "<unk>"];

pub fn is_special(id: usize) -> bool {
    id < RESERVED.len()
}

/// Splits text into word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    static WORDS: OnceLock<Regex> = OnceLock::new();
    let re = WORDS.get_or_init(|| Regex::new(r"\w+|[^\w\s]").expect("valid regex"));
    re.find_iter(text).map(|m| m.as_str()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(RadError::Contract(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens with reserved ids dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !is_special(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(RadError::Contract(
                "vocabulary file must start with the reserved tokens".into(),
            ));
        }
        Vocabulary::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::from_text(&util::read_to_string(path)?)
    }
}

/// Ranks word tokens by frequency (ties by first occurrence) and keeps as
/// many as fit after the reserved ids.
pub fn build_vocab(dialogues: &[Dialogue], max_size: usize) -> Result<Vocabulary> {
    if max_size <= RESERVED.len() {
        return Err(RadError::Contract(format!(
            "max vocabulary size {max_size} leaves no room beyond the reserved tokens"
        )));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0usize;
    for d in dialogues {
        for text in d.texts() {
            for tok in tokenize(text) {
                let e = counts.entry(tok).or_insert((0, order));
                if e.0 == 0 {
                    order += 1;
                }
                e.0 += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> =
        counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked
            .into_iter()
            .filter(|(t, _, _)| !RESERVED.contains(t))
            .take(max_size - RESERVED.len())
            .map(|(t, _, _)| t.to_string()),
    );
    Vocabulary::from_tokens(tokens)
}

/// One raw record: context turns (persona lines first, when present) and
/// the response text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub context: Vec<String>,
    pub response: String,
}

impl Dialogue {
    fn texts(&self) -> impl Iterator<Item = &str> {
        self.context
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(self.response.as_str()))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ContextField {
    One(String),
    Turns(Vec<String>),
}

#[derive(Deserialize)]
struct Record {
    context: ContextField,
    response: String,
    #[serde(default)]
    persona: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    /// Records skipped because a field was empty.
    pub skipped: usize,
}

/// Parses JSONL of `{"context": string | [string], "response": string,
/// "persona"?: [string]}`. Blank lines are ignored.
pub fn parse_corpus(text: &str, origin: &Path) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| RadError::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let turns = match rec.context {
            ContextField::One(s) => vec![s],
            ContextField::Turns(v) => v,
        };
        let mut context: Vec<String> = rec.persona;
        context.extend(turns);
        context.retain(|t| !t.trim().is_empty());
        if context.is_empty() || rec.response.trim().is_empty() {
            corpus.skipped += 1;
            continue;
        }
        corpus.dialogues.push(Dialogue {
            context,
            response: rec.response,
        });
    }
    if corpus.skipped > 0 {
        log::warn!(
            "{}: skipped {} records with empty fields",
            origin.display(),
            corpus.skipped
        );
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    parse_corpus(&util::read_to_string(path)?, path)
}

/// Writes dialogues as JSONL (context as a list of turns).
pub fn save_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    util::atomic_write(path, util::to_jsonl(dialogues)?.as_bytes())
}

/// Token ids for one example: context turns joined and terminated by SEP,
/// response terminated by EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePair {
    pub context: Vec<usize>,
    pub response: Vec<usize>,
}

/// Encodes context turns as `turn₁ SEP turn₂ SEP … SEP`.
pub fn encode_context(vocab: &Vocabulary, turns: &[String]) -> Vec<usize> {
    let mut ids = Vec::new();
    for turn in turns {
        ids.extend(vocab.encode(turn));
        ids.push(SEP);
    }
    ids
}

/// Encodes a dialogue, left-truncating the context when `m + n` exceeds
/// `max_positions`. Returns whether anything was cut.
pub fn encode_pair(
    vocab: &Vocabulary,
    dialogue: &Dialogue,
    max_positions: usize,
) -> Result<(DialoguePair, bool)> {
    if max_positions < 2 {
        return Err(RadError::Contract("max_positions must be at least 2".into()));
    }
    let mut context = encode_context(vocab, &dialogue.context);
    let mut response = vocab.encode(&dialogue.response);
    response.push(EOS);
    let mut truncated = false;
    if response.len() > max_positions - 1 {
        response.truncate(max_positions - 2);
        response.push(EOS);
        truncated = true;
    }
    let room = max_positions - response.len();
    if context.len() > room {
        context.drain(..context.len() - room);
        truncated = true;
    }
    Ok((DialoguePair { context, response }, truncated))
}

/// Encodes a whole corpus and reports how many pairs were truncated.
pub fn encode_corpus(
    vocab: &Vocabulary,
    dialogues: &[Dialogue],
    max_positions: usize,
) -> Result<Vec<DialoguePair>> {
    let mut pairs = Vec::with_capacity(dialogues.len());
    let mut truncated = 0;
    for d in dialogues {
        let (p, cut) = encode_pair(vocab, d, max_positions)?;
        truncated += usize::from(cut);
        pairs.push(p);
    }
    if truncated > 0 {
        log::warn!("truncated {truncated} of {} pairs to {max_positions} positions", pairs.len());
    }
    Ok(pairs)
}

/// Padded id matrices with masks (`true` marks a real token).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub context: Vec<Vec<usize>>,
    pub context_mask: Vec<Vec<bool>>,
    pub response: Vec<Vec<usize>>,
    pub response_mask: Vec<Vec<bool>>,
}

fn pad(rows: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut ids = r.to_vec();
            let mut mask = vec![true; r.len()];
            ids.resize(width, PAD);
            mask.resize(width, false);
            (ids, mask)
        })
        .unzip()
}

impl Batch {
    pub fn from_pairs(pairs: &[&DialoguePair]) -> Self {
        let ctx: Vec<&[usize]> = pairs.iter().map(|p| p.context.as_slice()).collect();
        let resp: Vec<&[usize]> = pairs.iter().map(|p| p.response.as_slice()).collect();
        let (context, context_mask) = pad(&ctx);
        let (response, response_mask) = pad(&resp);
        Batch {
            context,
            context_mask,
            response,
            response_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    /// Row `i` with padding removed.
    pub fn pair(&self, i: usize) -> DialoguePair {
        let strip = |ids: &[usize], mask: &[bool]| {
            ids.iter()
                .zip(mask)
                .filter(|(_, m)| **m)
                .map(|(id, _)| *id)
                .collect()
        };
        DialoguePair {
            context: strip(&self.context[i], &self.context_mask[i]),
            response: strip(&self.response[i], &self.response_mask[i]),
        }
    }
}

/// Shuffles with `rng` and cuts into batches of at most `batch_size`.
pub fn shuffled_batches<R: Rng + ?Sized>(
    pairs: &[DialoguePair],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let rows: Vec<&DialoguePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&rows)
        })
        .collect()
}

/// Parameters of the synthetic reversal corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            pairs: 500,
            alphabet: 20,
            min_len: 3,
            max_len: 8,
        }
    }
}

/// Symbol `i` of the synthetic alphabet: `a`, `b`, … then `a1`, `b1`, ….
pub fn synthetic_symbol(i: usize) -> String {
    let letter = (b'a' + (i % 26) as u8) as char;
    match i / 26 {
        0 => letter.to_string(),
        k => format!("{letter}{k}"),
    }
}

/// Copy-task corpus: each context is a random symbol string and the
/// response is the same string reversed.
pub fn make_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Vec<Dialogue>> {
    if spec.alphabet == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(RadError::Contract(format!("invalid synthetic spec {spec:?}")));
    }
    let symbols: Vec<String> = (0..spec.alphabet).map(synthetic_symbol).collect();
    Ok((0..spec.pairs)
        .map(|_| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let seq: Vec<&str> = (0..len)
                .map(|_| symbols[rng.gen_range(0..symbols.len())].as_str())
                .collect();
            let reversed: Vec<&str> = seq.iter().rev().copied().collect();
            Dialogue {
                context: vec![seq.join(" ")],
                response: reversed.join(" "),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dlg(ctx: &str, resp: &str) -> Dialogue {
        Dialogue {
            context: vec![ctx.into()],
            response: resp.into(),
        }
    }

    #[test]
    fn tokenizer_splits_words_and_punctuation() {
        assert_eq!(tokenize("Hi, how's it?"), vec!["Hi", ",", "how", "'", "s", "it", "?"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn vocab_examples() {
        let corpus = [dlg("a a", "b")];
        let v = build_vocab(&corpus, 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);

        let v = build_vocab(&corpus, 6).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), UNK);

        assert!(build_vocab(&corpus, 5).is_err());
    }

    #[test]
    fn vocab_ranking_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let words = ["x", "y", "z", "w", "v", "u", "t"];
        let corpus: Vec<Dialogue> = (0..40)
            .map(|_| {
                let pick = |rng: &mut ChaCha8Rng, n: usize| {
                    (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
                };
                let c = pick(&mut rng, 4);
                let r = pick(&mut rng, 3);
                dlg(&c, &r)
            })
            .collect();

        // Oracle: count in a flat stream, then stable sort by descending count.
        let mut stream = Vec::new();
        for d in &corpus {
            stream.extend(d.context[0].split(' '));
            stream.extend(d.response.split(' '));
        }
        let mut seen: Vec<&str> = Vec::new();
        for w in &stream {
            if !seen.contains(w) {
                seen.push(w);
            }
        }
        let count = |w: &str| stream.iter().filter(|s| **s == w).count();
        seen.sort_by_key(|w| std::cmp::Reverse(count(w)));

        let v = build_vocab(&corpus, 5 + seen.len()).unwrap();
        for (i, w) in seen.iter().enumerate() {
            assert_eq!(v.id(w), 5 + i, "{w}");
        }
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = build_vocab(&[dlg("hello there", "general kenobi")], 100).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    #[test]
    fn parse_examples() {
        let text = r#"{"context": "hi there", "response": "hello"}
{"context": ["how are you", "fine"], "response": "good", "persona": ["i like tea"]}
"#;
        let c = parse_corpus(text, Path::new("mem")).unwrap();
        assert_eq!(c.dialogues.len(), 2);
        assert_eq!(
            c.dialogues[1].context,
            vec!["i like tea", "how are you", "fine"]
        );

        let bad = "{\"context\": \"a\", \"response\": \"b\"}\n{\"context\": \"a\"}\n";
        match parse_corpus(bad, Path::new("mem")) {
            Err(RadError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("response"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let empty = "{\"context\": \"\", \"response\": \"b\"}\n{\"context\": \"a\", \"response\": \" \"}\n";
        let c = parse_corpus(empty, Path::new("mem")).unwrap();
        assert_eq!(c.dialogues.len(), 0);
        assert_eq!(c.skipped, 2);
    }

    #[test]
    fn encode_joins_turns_with_sep() {
        let d = Dialogue {
            context: vec!["a b".into(), "c".into()],
            response: "d".into(),
        };
        let v = build_vocab(std::slice::from_ref(&d), 50).unwrap();
        let (p, cut) = encode_pair(&v, &d, 64).unwrap();
        assert!(!cut);
        assert_eq!(p.context, vec![v.id("a"), v.id("b"), SEP, v.id("c"), SEP]);
        assert_eq!(p.response, vec![v.id("d"), EOS]);
    }

    #[test]
    fn overlong_context_is_cut_from_the_left() {
        let d = dlg("one two three four five", "six seven");
        let v = build_vocab(std::slice::from_ref(&d), 50).unwrap();
        let (p, cut) = encode_pair(&v, &d, 6).unwrap();
        assert!(cut);
        assert_eq!(p.context, vec![v.id("four"), v.id("five"), SEP]);
        assert_eq!(p.context.len() + p.response.len(), 6);

        let (p, cut) = encode_pair(&v, &dlg("x", "a b c d e f g"), 4).unwrap();
        assert!(cut);
        assert_eq!(p.response.len(), 3);
        assert_eq!(*p.response.last().unwrap(), EOS);
        assert_eq!(p.context, vec![SEP]);
    }

    #[test]
    fn batch_pads_and_unpads() {
        let a = DialoguePair { context: vec![5, 6, SEP], response: vec![7, EOS] };
        let b = DialoguePair { context: vec![8, SEP], response: vec![9, 10, 11, EOS] };
        let batch = Batch::from_pairs(&[&a, &b]);
        assert_eq!(batch.context[1], vec![8, SEP, PAD]);
        assert_eq!(batch.response_mask[0], vec![true, true, false, false]);
        assert_eq!(batch.pair(0), a);
        assert_eq!(batch.pair(1), b);
    }

    #[test]
    fn batch_order_is_a_function_of_seed() {
        let pairs: Vec<DialoguePair> = (0..10)
            .map(|i| DialoguePair { context: vec![5 + i, SEP], response: vec![EOS] })
            .collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled_batches(&pairs, 3, &mut rng)
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        assert_eq!(run(1).len(), 4);
    }

    #[test]
    fn synthetic_round_trips_through_tokenizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = SyntheticSpec::default();
        let corpus = make_synthetic(&spec, &mut rng).unwrap();
        assert_eq!(corpus.len(), 500);
        let text = util::to_jsonl(&corpus).unwrap();
        let loaded = parse_corpus(&text, Path::new("mem")).unwrap();
        assert_eq!(loaded.dialogues, corpus);

        let vocab = build_vocab(&loaded.dialogues, 100).unwrap();
        assert_eq!(vocab.len(), 5 + 20);
        for d in &loaded.dialogues {
            let ids = vocab.encode(&d.response);
            assert!(ids.iter().all(|&i| i != UNK));
            assert_eq!(vocab.decode(&ids), d.response);
            let mut rev: Vec<&str> = d.context[0].split(' ').collect();
            rev.reverse();
            assert_eq!(rev.join(" "), d.response);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn decode_encode_is_identity_modulo_whitespace(
                words in proptest::collection::vec("[a-z]{1,6}|[,.!?]", 1..12),
                seps in proptest::collection::vec(" {1,3}|\t", 12),
            ) {
                let mut text = String::new();
                for (w, s) in words.iter().zip(&seps) {
                    text.push_str(w);
                    text.push_str(s);
                }
                let d = Dialogue { context: vec![text.clone()], response: "x".into() };
                let vocab = build_vocab(&[d], 1000).unwrap();
                let ids = vocab.encode(&text);
                let decoded = vocab.decode(&ids);
                prop_assert_eq!(vocab.encode(&decoded), ids);
                prop_assert_eq!(decoded, tokenize(&text).join(" "));
            }
        }
    }
}
