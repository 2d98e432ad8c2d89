//! N-best rescoring, word error rate and the matched-pair significance test.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use statrs::function::erf::erfc;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::evaluator::InterpolationWeights;
use crate::network::{score_sentences, LmModel};
use crate::ops::log_sum_exp;
use crate::par;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub utt_id: String,
    pub rank: u32,
    pub am_score: f64,
    pub old_lm_score: f64,
    pub words: Vec<String>,
}

/// Hypotheses per utterance, each list ordered by rank.
pub type NBest = BTreeMap<String, Vec<Hypothesis>>;

/// Word sequences per utterance (references or chosen hypotheses).
pub type Transcripts = BTreeMap<String, Vec<String>>;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn score_field(field: &str, what: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("{what} `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("{what} {v} is not finite")));
    }
    Ok(v)
}

/// Parses `utt<TAB>rank<TAB>am<TAB>old_lm<TAB>words…` lines. The words
/// field may be empty or absent.
pub fn parse_nbest(text: &str, path: &Path) -> Result<NBest> {
    let mut out = NBest::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let fields: Vec<&str> = line.splitn(5, '\t').collect();
        if fields.len() < 4 {
            return Err(Error::parse(path, n, "expected utt, rank, am score, old lm score and words separated by tabs"));
        }
        let utt_id = fields[0].trim();
        if utt_id.is_empty() || utt_id.contains(char::is_whitespace) {
            return Err(Error::parse(path, n, format!("bad utterance id `{}`", fields[0])));
        }
        let rank: u32 = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, n, format!("rank `{}` is not a non-negative integer", fields[1])))?;
        let h = Hypothesis {
            utt_id: utt_id.to_string(),
            rank,
            am_score: score_field(fields[2], "am score", path, n)?,
            old_lm_score: score_field(fields[3], "old lm score", path, n)?,
            words: fields.get(4).map_or_else(Vec::new, |w| words(w)),
        };
        let list = out.entry(h.utt_id.clone()).or_default();
        if list.iter().any(|o| o.rank == rank) {
            return Err(Error::parse(path, n, format!("duplicate rank {rank} for utterance {utt_id}")));
        }
        list.push(h);
    }
    for list in out.values_mut() {
        list.sort_by_key(|h| h.rank);
    }
    Ok(out)
}

pub fn read_nbest(path: &Path) -> Result<NBest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_nbest(&text, path)
}

pub fn format_nbest(nbest: &NBest) -> String {
    let mut s = String::new();
    for h in nbest.values().flatten() {
        writeln!(s, "{}\t{}\t{}\t{}\t{}", h.utt_id, h.rank, h.am_score, h.old_lm_score, h.words.join(" ")).expect("string write");
    }
    s
}

/// Parses `utt<TAB>words…` lines.
pub fn parse_transcripts(text: &str, path: &Path) -> Result<Transcripts> {
    let mut out = Transcripts::new();
    for (i, line) in text.lines().enumerate() {
        let (utt, rest) = line.split_once('\t').unwrap_or((line, ""));
        let utt = utt.trim();
        if utt.is_empty() || utt.contains(char::is_whitespace) {
            return Err(Error::parse(path, i + 1, format!("bad utterance id in `{line}`")));
        }
        match out.entry(utt.to_string()) {
            Entry::Occupied(_) => return Err(Error::parse(path, i + 1, format!("duplicate utterance {utt}"))),
            Entry::Vacant(v) => {
                v.insert(words(rest));
            }
        }
    }
    Ok(out)
}

pub fn read_transcripts(path: &Path) -> Result<Transcripts> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_transcripts(&text, path)
}

pub fn format_transcripts(t: &Transcripts) -> String {
    let mut s = String::new();
    for (utt, w) in t {
        writeln!(s, "{utt}\t{}", w.join(" ")).expect("string write");
    }
    s
}

/// Natural-log sentence probabilities for word sequences, `<s>`/`</s>`
/// wrapping included.
pub trait SentenceScorer: Sync {
    fn log_probs(&self, sentences: &[&[String]]) -> Result<Vec<f64>>;
}

impl<F> SentenceScorer for F
where
    F: Fn(&[String]) -> f64 + Sync + Send,
{
    fn log_probs(&self, sentences: &[&[String]]) -> Result<Vec<f64>> {
        Ok(par::map(sentences, |s| self(s)))
    }
}

/// Linear interpolation of one or more neural models sharing a vocabulary.
pub struct ModelScorer<'a, T> {
    pub models: Vec<&'a LmModel<T>>,
    pub weights: InterpolationWeights,
    pub vocab: &'a Vocabulary,
    pub batch: usize,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(models: Vec<&'a LmModel<T>>, weights: InterpolationWeights, vocab: &'a Vocabulary, batch: usize) -> Result<Self> {
        if models.is_empty() || models.len() != weights.len() {
            return Err(Error::LengthMismatch(format!("{} models for {} weights", models.len(), weights.len())));
        }
        for m in &models {
            if m.vocab_fingerprint != vocab.fingerprint() {
                return Err(Error::FingerprintMismatch {
                    expected: vocab.fingerprint().to_string(),
                    found: m.vocab_fingerprint.clone(),
                });
            }
        }
        Ok(ModelScorer {
            models,
            weights,
            vocab,
            batch,
        })
    }
}

impl<T: Real> SentenceScorer for ModelScorer<'_, T> {
    fn log_probs(&self, sentences: &[&[String]]) -> Result<Vec<f64>> {
        let ids: Vec<Vec<u32>> = sentences.iter().map(|s| self.vocab.encode_words(s.iter().map(String::as_str))).collect();
        let per_model = self
            .models
            .iter()
            .map(|m| score_sentences(*m, &ids, self.batch))
            .collect::<Result<Vec<_>>>()?;
        let log_w: Vec<f64> = self.weights.as_slice().iter().map(|w| w.ln()).collect();
        let mut buf = Vec::with_capacity(log_w.len());
        Ok((0..ids.len())
            .map(|i| {
                let n = per_model[0][i].num_tokens;
                (0..n)
                    .map(|t| {
                        buf.clear();
                        buf.extend(per_model.iter().zip(&log_w).map(|(s, lw)| lw + s[i].token_log_probs[t]));
                        log_sum_exp(&buf).min(0.0)
                    })
                    .sum()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescoreConfig {
    pub lm_weight: f64,
    pub word_insertion_penalty: f64,
}

impl RescoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("lm weight {} must be finite and ≥ 0", self.lm_weight)));
        }
        if !self.word_insertion_penalty.is_finite() {
            return Err(Error::InvalidArgument("word insertion penalty must be finite".into()));
        }
        Ok(())
    }

    pub fn combined(&self, h: &Hypothesis, lm: f64) -> f64 {
        h.am_score + self.lm_weight * lm + self.word_insertion_penalty * h.words.len() as f64
    }
}

/// New LM log probability of every hypothesis, aligned with the N-best
/// lists.
pub type LmScores = BTreeMap<String, Vec<f64>>;

pub fn lm_scores(nbest: &NBest, scorer: &dyn SentenceScorer) -> Result<LmScores> {
    let flat: Vec<&[String]> = nbest.values().flatten().map(|h| h.words.as_slice()).collect();
    let scores = scorer.log_probs(&flat)?;
    if scores.len() != flat.len() {
        return Err(Error::LengthMismatch(format!("{} scores for {} hypotheses", scores.len(), flat.len())));
    }
    let mut it = scores.into_iter();
    Ok(nbest
        .iter()
        .map(|(utt, list)| (utt.clone(), it.by_ref().take(list.len()).collect()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHypothesis {
    pub rank: u32,
    pub lm_score: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescored {
    pub chosen: Hypothesis,
    pub scores: Vec<ScoredHypothesis>,
}

/// Picks the best hypothesis per utterance from precomputed LM scores.
/// Ties go to the lowest original rank.
pub fn select(nbest: &NBest, scores: &LmScores, cfg: &RescoreConfig) -> Result<BTreeMap<String, Rescored>> {
    cfg.validate()?;
    let mut out = BTreeMap::new();
    for (utt, list) in nbest {
        if list.is_empty() {
            return Err(Error::Empty(format!("utterance {utt} has no hypotheses")));
        }
        let lm = scores
            .get(utt)
            .filter(|s| s.len() == list.len())
            .ok_or_else(|| Error::LengthMismatch(format!("no LM scores for utterance {utt}")))?;
        let scored: Vec<ScoredHypothesis> = list
            .iter()
            .zip(lm)
            .map(|(h, &l)| ScoredHypothesis {
                rank: h.rank,
                lm_score: l,
                combined: cfg.combined(h, l),
            })
            .collect();
        // Lists are rank-ordered, so keeping the first maximum breaks ties
        // towards the lower rank.
        let mut best = 0;
        for (i, s) in scored.iter().enumerate() {
            if s.combined > scored[best].combined {
                best = i;
            }
        }
        out.insert(
            utt.clone(),
            Rescored {
                chosen: list[best].clone(),
                scores: scored,
            },
        );
    }
    Ok(out)
}

pub fn rescore(nbest: &NBest, scorer: &dyn SentenceScorer, cfg: &RescoreConfig) -> Result<BTreeMap<String, Rescored>> {
    cfg.validate()?;
    let scores = lm_scores(nbest, scorer)?;
    select(nbest, &scores, cfg)
}

pub fn chosen_words(r: &BTreeMap<String, Rescored>) -> Transcripts {
    r.iter().map(|(u, x)| (u.clone(), x.chosen.words.clone())).collect()
}

/// TSV: utt, rank, am, lm, combined, 1 if chosen.
pub fn format_score_dump(nbest: &NBest, r: &BTreeMap<String, Rescored>) -> String {
    let mut s = String::from("utt\trank\tam\tlm\tcombined\tchosen\n");
    for (utt, list) in nbest {
        let Some(x) = r.get(utt) else { continue };
        for (h, sc) in list.iter().zip(&x.scores) {
            let chosen = u8::from(h.rank == x.chosen.rank);
            writeln!(s, "{utt}\t{}\t{}\t{}\t{}\t{chosen}", h.rank, h.am_score, sc.lm_score, sc.combined).expect("string write");
        }
    }
    s
}

/// Edit operation counts from a minimum-cost alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn add(&mut self, o: EditCounts) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

/// Levenshtein alignment with unit costs.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerReport {
    pub wer: f64,
    pub counts: EditCounts,
    pub ref_words: usize,
}

/// Corpus-level WER over the utterances in `hyps`.
pub fn wer(hyps: &Transcripts, refs: &Transcripts) -> Result<WerReport> {
    let mut counts = EditCounts::default();
    let mut ref_words = 0;
    for (utt, h) in hyps {
        let r = refs
            .get(utt)
            .ok_or_else(|| Error::InvalidArgument(format!("no reference for utterance {utt}")))?;
        counts.add(align(r, h));
        ref_words += r.len();
    }
    if ref_words == 0 {
        return Err(Error::Empty("references contain no words".into()));
    }
    Ok(WerReport {
        wer: counts.errors() as f64 / ref_words as f64,
        counts,
        ref_words,
    })
}

/// Grid search for the LM weight with the lowest WER on a development set.
/// Ties go to the smaller weight. Returns (weight, WER).
pub fn tune_lm_weight(dev: &NBest, scores: &LmScores, refs: &Transcripts, grid: &[f64], wip: f64) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    for &lm_weight in &grid {
        let cfg = RescoreConfig {
            lm_weight,
            word_insertion_penalty: wip,
        };
        let w = wer(&chosen_words(&select(dev, scores, &cfg)?), refs)?.wer;
        if best.is_none_or(|(_, b)| w < b) {
            best = Some((lm_weight, w));
        }
    }
    best.ok_or_else(|| Error::Empty("empty weight grid".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub z: f64,
    /// Two-sided, normal approximation.
    pub p: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Matched-pair test on per-utterance error counts, `d_i = errors_A −
/// errors_B`. With `differing_only`, segments where both systems make the
/// same number of errors are left out.
pub fn matched_pair_test(a: &Transcripts, b: &Transcripts, refs: &Transcripts, differing_only: bool) -> Result<MatchedPair> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::InvalidArgument("systems cover different utterances".into()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 segments, got {}", a.len())));
    }
    let mut d = Vec::with_capacity(a.len());
    for (utt, ha) in a {
        let r = refs
            .get(utt)
            .ok_or_else(|| Error::InvalidArgument(format!("no reference for utterance {utt}")))?;
        let di = align(r, ha).errors() as f64 - align(r, &b[utt]).errors() as f64;
        if !differing_only || di != 0.0 {
            d.push(di);
        }
    }
    let n = d.len();
    if n == 0 {
        return Ok(MatchedPair {
            z: 0.0,
            p: 1.0,
            n,
            mean: 0.0,
            std: 0.0,
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument("only one segment differs; the test needs at least 2".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let (z, p) = if std == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let z = mean / (std / (n as f64).sqrt());
        (z, erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0))
    };
    Ok(MatchedPair { z, p, n, mean, std })
}

#[cfg(test)]
mod tests;
