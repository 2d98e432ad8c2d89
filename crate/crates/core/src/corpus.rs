//! Vocabulary, sentence encoding and batch construction.
//!
//! Corpora are UTF-8, one sentence per line, tokens separated by whitespace.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::Batch;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

const RESERVED: [&str; 3] = [UNK, BOS, EOS];

/// Token ↔ id mapping. Ids are dense and the sentinels hold ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    fingerprint: String,
}

fn fingerprint_of(tokens: &[String]) -> String {
    let mut h = Sha256::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            h.update(b"\n");
        }
        h.update(t.as_bytes());
    }
    format!("{:x}", h.finalize())
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list that starts with the
    /// three sentinels.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with {UNK}, {BOS}, {EOS}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("token {i} is empty or contains whitespace")));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        let fingerprint = fingerprint_of(&tokens);
        Ok(Vocabulary {
            tokens,
            ids,
            fingerprint,
        })
    }

    /// Keeps the `max_size − 3` most frequent tokens; equal counts keep
    /// first-occurrence order.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < 3 {
            return Err(Error::InvalidArgument(format!("max_size {max_size} leaves no room for sentinels")));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for line in lines {
            for tok in line.split_whitespace() {
                seen += 1;
                if RESERVED.contains(&tok) {
                    continue;
                }
                let next = counts.len();
                counts.entry(tok).or_insert((0, next)).0 += 1;
            }
        }
        if seen == 0 {
            return Err(Error::Empty("corpus has no tokens".into()));
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_size - 3).map(|(t, _, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, or the `<unk>` id.
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `<s> w… </s>` with out-of-vocabulary words mapped to `<unk>`.
    pub fn encode(&self, line: &str) -> Vec<u32> {
        self.encode_words(line.split_whitespace())
    }

    pub fn encode_words<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> Vec<u32> {
        let mut out = vec![BOS_ID];
        out.extend(words.into_iter().map(|w| self.id(w)));
        out.push(EOS_ID);
        out
    }

    /// Space-joined tokens with `<s>` and `</s>` removed.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != BOS_ID && i != EOS_ID)
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        Self::from_tokens(lines.into_iter().map(|l| l.trim().to_string()).collect()).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::parse(path, 0, m),
            other => other,
        })
    }
}

/// Reads a UTF-8 text file as lines, reporting the first invalid line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| Error::parse(path, i + 1, "invalid UTF-8"))?;
        out.push(line.to_string());
    }
    if out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    Ok(out)
}

/// Vocabulary of the corpus at `path`.
pub fn build_vocab(path: &Path, max_size: usize) -> Result<Vocabulary> {
    let lines = read_lines(path)?;
    Vocabulary::build(lines.iter().map(String::as_str), max_size)
}

/// Splits off the last `k` lines as heldout data.
pub fn split_heldout<S: Clone>(lines: &[S], k: usize) -> Result<(Vec<S>, Vec<S>)> {
    if k >= lines.len() {
        return Err(Error::InvalidArgument(format!(
            "heldout size {k} leaves no training lines out of {}",
            lines.len()
        )));
    }
    let cut = lines.len() - k;
    Ok((lines[..cut].to_vec(), lines[cut..].to_vec()))
}

/// Encoded sentences laid end to end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    lines: usize,
}

impl TokenStream {
    pub fn from_lines<S: AsRef<str>>(vocab: &Vocabulary, lines: &[S]) -> Self {
        let mut ids = Vec::new();
        for l in lines {
            ids.extend(vocab.encode(l.as_ref()));
        }
        TokenStream { ids, lines: lines.len() }
    }

    pub fn from_ids(ids: Vec<u32>, lines: usize) -> Self {
        TokenStream { ids, lines }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn lines(&self) -> usize {
        self.lines
    }
}

/// One truncated-BPTT window over `lanes` parallel lanes, lane-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub lanes: usize,
    pub len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// False only for the first window; later windows continue the state.
    pub carry: bool,
}

impl Window {
    /// As a network batch. Positions whose target is `<s>` are masked out:
    /// a sentence start is never predicted.
    pub fn to_batch(&self) -> Batch {
        let mask = self.targets.iter().map(|&t| t != BOS_ID).collect();
        Batch::with_mask(self.lanes, self.len, self.inputs.clone(), self.targets.clone(), mask).expect("window shape")
    }
}

/// Splits the stream into `b` contiguous lanes and cuts windows of `l`
/// steps. The trailing partial window is dropped.
pub fn make_batches(stream: &TokenStream, b: usize, l: usize) -> Result<Vec<Window>> {
    make_batches_from(stream, b, l, 0)
}

/// [`make_batches`] after skipping the first `offset` ids.
pub fn make_batches_from(stream: &TokenStream, b: usize, l: usize, offset: usize) -> Result<Vec<Window>> {
    if b == 0 || l == 0 {
        return Err(Error::InvalidArgument("batch size and window length must be positive".into()));
    }
    let ids = stream.ids.get(offset..).unwrap_or(&[]);
    if ids.len() < b * (l + 1) {
        return Err(Error::InvalidArgument(format!(
            "stream of {} ids is too short for {b} lanes of {} ids",
            ids.len(),
            l + 1
        )));
    }
    let lane_len = ids.len() / b;
    let count = (lane_len - 1) / l;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let mut inputs = Vec::with_capacity(b * l);
        let mut targets = Vec::with_capacity(b * l);
        for lane in 0..b {
            let start = lane * lane_len + w * l;
            inputs.extend_from_slice(&ids[start..start + l]);
            targets.extend_from_slice(&ids[start + 1..start + l + 1]);
        }
        out.push(Window {
            lanes: b,
            len: l,
            inputs,
            targets,
            carry: w > 0,
        });
    }
    Ok(out)
}

/// Pads independent sentences (each `<s> … </s>`) into batches of up to
/// `b` sentences. Padding positions are masked.
pub fn sentence_batches(sentences: &[Vec<u32>], b: usize) -> Result<Vec<Batch>> {
    if b == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut out = Vec::new();
    for group in sentences.chunks(b) {
        let len = group.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Empty("sentence with nothing to predict".into()));
        }
        let lanes = group.len();
        let mut inputs = vec![EOS_ID; lanes * len];
        let mut targets = vec![EOS_ID; lanes * len];
        let mut mask = vec![false; lanes * len];
        for (lane, s) in group.iter().enumerate() {
            for t in 0..s.len().saturating_sub(1) {
                inputs[lane * len + t] = s[t];
                targets[lane * len + t] = s[t + 1];
                mask[lane * len + t] = true;
            }
        }
        out.push(Batch::with_mask(lanes, len, inputs, targets, mask)?);
    }
    Ok(out)
}
