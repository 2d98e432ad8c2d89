//! Perplexity, linear interpolation of per-token probabilities and EM
//! estimation of mixture weights.
//!
//! Every stream holds natural-log probabilities.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{score_sentences, LmModel};
use crate::ops::log_sum_exp;
use crate::tensor::Real;

const HEADER: &str = "#hwlm-probs v1";

/// Per-token natural-log probabilities of one model over a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbStream {
    pub label: String,
    pub log_probs: Vec<f64>,
}

impl ProbStream {
    pub fn new(label: impl Into<String>, log_probs: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if label.is_empty() || label.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("stream label `{label}` must be one word")));
        }
        if let Some(i) = log_probs.iter().position(|&v| v.is_nan() || v > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "log probability {} at token {i} is not ≤ 0",
                log_probs[i]
            )));
        }
        Ok(ProbStream { label, log_probs })
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// File text: header line, then one value per line. Values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.log_probs.len() * 20 + 40);
        writeln!(s, "{HEADER} {} {}", self.label, self.log_probs.len()).expect("string write");
        for v in &self.log_probs {
            writeln!(s, "{v}").expect("string write");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| Error::parse(path, 1, "missing header"))?;
        let rest = head
            .strip_prefix(HEADER)
            .ok_or_else(|| Error::parse(path, 1, format!("header must start with `{HEADER}`")))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let [label, count] = fields[..] else {
            return Err(Error::parse(path, 1, "header needs a label and a token count"));
        };
        let count: usize = count
            .parse()
            .map_err(|_| Error::parse(path, 1, format!("bad token count `{count}`")))?;
        let mut log_probs = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, i + 2, format!("bad log probability `{line}`")))?;
            if v.is_nan() || v > 0.0 {
                return Err(Error::parse(path, i + 2, format!("log probability {v} is not ≤ 0")));
            }
            log_probs.push(v);
        }
        if log_probs.len() != count {
            return Err(Error::LengthMismatch(format!(
                "{}: header says {count} tokens, found {}",
                path.display(),
                log_probs.len()
            )));
        }
        Self::new(label, log_probs)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// `exp(−mean log p)` over a sequence of natural-log probabilities.
pub fn perplexity_of(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Empty("no tokens to evaluate".into()));
    }
    if let Some(i) = log_probs.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("token {i} has probability zero")));
    }
    let mean = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    Ok((-mean).exp())
}

/// Perplexity of `stream` over `num_tokens` predicted tokens.
pub fn perplexity(stream: &ProbStream, num_tokens: usize) -> Result<f64> {
    if stream.len() != num_tokens {
        return Err(Error::LengthMismatch(format!(
            "stream `{}` has {} values for {num_tokens} tokens",
            stream.label,
            stream.len()
        )));
    }
    perplexity_of(&stream.log_probs)
}

/// Scores `<s> … </s>` sentences with a model and concatenates the
/// per-token log probabilities.
pub fn model_stream<T: Real>(model: &LmModel<T>, label: &str, sentences: &[Vec<u32>], batch: usize) -> Result<ProbStream> {
    let scores = score_sentences(model, sentences, batch)?;
    let log_probs = scores.into_iter().flat_map(|s| s.token_log_probs).collect();
    ProbStream::new(label, log_probs)
}

/// Heldout perplexity of a model and the number of predicted tokens.
pub fn model_perplexity<T: Real>(model: &LmModel<T>, sentences: &[Vec<u32>], batch: usize) -> Result<(f64, usize)> {
    let s = model_stream(model, "model", sentences, batch)?;
    Ok((perplexity_of(&s.log_probs)?, s.len()))
}

/// Convex mixture weights, one per component.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationWeights(Vec<f64>);

impl InterpolationWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Empty("no interpolation weights".into()));
        }
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("weights {w:?} must be finite and ≥ 0")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {sum}, not 1")));
        }
        Ok(InterpolationWeights(w))
    }

    pub fn uniform(k: usize) -> Self {
        InterpolationWeights(vec![1.0 / k as f64; k])
    }

    /// All mass on component `i`.
    pub fn corner(k: usize, i: usize) -> Self {
        let mut w = vec![0.0; k];
        w[i] = 1.0;
        InterpolationWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_aligned(streams: &[ProbStream]) -> Result<usize> {
    let first = streams.first().ok_or_else(|| Error::Empty("no streams".into()))?;
    for s in streams {
        if s.len() != first.len() {
            return Err(Error::LengthMismatch(format!(
                "stream `{}` has {} tokens, `{}` has {}",
                s.label,
                s.len(),
                first.label,
                first.len()
            )));
        }
    }
    Ok(first.len())
}

/// Per-token log of the weighted mixture `Σ_k w_k p_k`, computed with
/// log-sum-exp.
fn mix(streams: &[ProbStream], log_w: &[f64], t: usize, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    buf.extend(streams.iter().zip(log_w).map(|(s, &lw)| lw + s.log_probs[t]));
    let v = log_sum_exp(buf);
    v.min(0.0)
}

/// Linear interpolation in the probability domain.
pub fn interpolate(streams: &[ProbStream], w: &InterpolationWeights) -> Result<ProbStream> {
    let n = check_aligned(streams)?;
    if w.len() != streams.len() {
        return Err(Error::LengthMismatch(format!("{} weights for {} streams", w.len(), streams.len())));
    }
    // A zero weight removes a component outright, so corner weights return
    // that stream bit for bit.
    let active: Vec<(usize, f64)> = w.as_slice().iter().copied().enumerate().filter(|&(_, x)| x > 0.0).collect();
    let sub: Vec<ProbStream> = active.iter().map(|&(i, _)| streams[i].clone()).collect();
    let log_w: Vec<f64> = active.iter().map(|&(_, x)| x.ln()).collect();
    let mut buf = Vec::with_capacity(sub.len());
    let log_probs = if sub.len() == 1 {
        sub[0].log_probs.clone()
    } else {
        (0..n).map(|t| mix(&sub, &log_w, t, &mut buf)).collect()
    };
    let label = streams.iter().map(|s| s.label.as_str()).collect::<Vec<_>>().join("+");
    ProbStream::new(label, log_probs)
}

/// Total log likelihood of the mixture with weights `w`.
pub fn log_likelihood(streams: &[ProbStream], w: &[f64]) -> f64 {
    let log_w: Vec<f64> = w.iter().map(|x| x.ln()).collect();
    let n = streams.first().map_or(0, ProbStream::len);
    let mut buf = Vec::with_capacity(streams.len());
    (0..n).map(|t| mix(streams, &log_w, t, &mut buf)).sum()
}

/// Result of [`estimate_weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub weights: InterpolationWeights,
    /// Heldout log likelihood before the first update and after each one.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// All streams were identical, so every weighting is equivalent and the
    /// uniform weights were returned.
    pub degenerate: bool,
}

pub const EM_TOLERANCE: f64 = 1e-8;
pub const EM_MAX_ITERATIONS: usize = 200;

/// Weights this small whose likelihood gradient points outward are tried at
/// exactly zero once EM settles.
const SNAP_BELOW: f64 = 1e-3;
const MAX_BACKTRACKS: usize = 12;

/// One EM update: each weight becomes its mean responsibility.
fn em_update(streams: &[ProbStream], w: &[f64], buf: &mut Vec<f64>) -> Vec<f64> {
    let n = streams[0].len();
    let log_w: Vec<f64> = w.iter().map(|x| x.ln()).collect();
    let mut acc = vec![0.0; w.len()];
    for t in 0..n {
        buf.clear();
        buf.extend(streams.iter().zip(&log_w).map(|(s, &lw)| lw + s.log_probs[t]));
        let z = log_sum_exp(buf);
        for (a, &v) in acc.iter_mut().zip(buf.iter()) {
            *a += (v - z).exp();
        }
    }
    let sum: f64 = acc.iter().sum();
    acc.iter().map(|a| a / sum).collect()
}

/// Mean of `p_k / p_mix` per component. At the optimum it is 1 for every
/// component with positive weight and at most 1 for the others.
fn mean_ratio(streams: &[ProbStream], w: &[f64], buf: &mut Vec<f64>) -> Vec<f64> {
    let n = streams[0].len();
    let log_w: Vec<f64> = w.iter().map(|x| x.ln()).collect();
    let mut g = vec![0.0; w.len()];
    for t in 0..n {
        let z = mix(streams, &log_w, t, buf);
        for (gk, s) in g.iter_mut().zip(streams) {
            *gk += (s.log_probs[t] - z).exp();
        }
    }
    g.iter().map(|x| x / n as f64).collect()
}

struct EmRun<'a> {
    streams: &'a [ProbStream],
    history: Vec<f64>,
    iterations: usize,
    buf: Vec<f64>,
}

impl EmRun<'_> {
    fn push(&mut self, ll: f64) {
        let prev = *self.history.last().expect("non-empty");
        // EM never lowers the likelihood; allow only rounding-level slack.
        assert!(
            ll >= prev - 1e-9 * prev.abs().max(1.0),
            "EM likelihood decreased from {prev} to {ll}"
        );
        self.history.push(ll);
    }

    /// EM with squared extrapolation along the EM path. A step is kept only
    /// if it does at least as well as two plain EM updates, so the
    /// likelihood still never decreases.
    fn iterate(&mut self, mut w: Vec<f64>) -> (Vec<f64>, bool) {
        while self.iterations < EM_MAX_ITERATIONS {
            self.iterations += 1;
            let w1 = em_update(self.streams, &w, &mut self.buf);
            let w2 = em_update(self.streams, &w1, &mut self.buf);
            let mut next = (log_likelihood(self.streams, &w2), w2.clone());
            let r: Vec<f64> = w1.iter().zip(&w).map(|(a, b)| a - b).collect();
            let v: Vec<f64> = w2.iter().zip(&w1).zip(&r).map(|((a, b), c)| a - b - c).collect();
            let norm = |x: &[f64]| x.iter().map(|y| y * y).sum::<f64>().sqrt();
            let (rn, vn) = (norm(&r), norm(&v));
            let mut alpha = if vn > 0.0 { -rn / vn } else { -1.0 };
            for _ in 0..MAX_BACKTRACKS {
                if alpha >= -1.0 {
                    break;
                }
                let cand: Vec<f64> = w
                    .iter()
                    .zip(&r)
                    .zip(&v)
                    .map(|((x, a), b)| x - 2.0 * alpha * a + alpha * alpha * b)
                    .collect();
                let feasible = cand.iter().zip(&w).all(|(c, x)| if *x > 0.0 { *c > 0.0 } else { *c == 0.0 });
                if feasible {
                    let c = em_update(self.streams, &cand, &mut self.buf);
                    let ll = log_likelihood(self.streams, &c);
                    if ll >= next.0 {
                        next = (ll, c);
                        break;
                    }
                }
                alpha = (alpha - 1.0) / 2.0;
            }
            let change = next.1.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            w = next.1;
            self.push(next.0);
            if change < EM_TOLERANCE {
                return (w, true);
            }
        }
        (w, false)
    }
}

/// Maximum-likelihood mixture weights by expectation–maximization, starting
/// from uniform weights. The EM updates are accelerated by extrapolation;
/// near-redundant streams otherwise need thousands of plain updates.
/// Weights that EM drives towards zero are then tried at exactly zero and
/// kept there when the optimality conditions hold on that face.
pub fn estimate_weights(streams: &[ProbStream]) -> Result<EmResult> {
    if streams.len() < 2 {
        return Err(Error::InvalidArgument("weight estimation needs at least two streams".into()));
    }
    let n = check_aligned(streams)?;
    if n == 0 {
        return Err(Error::Empty("streams are empty".into()));
    }
    for t in 0..n {
        if streams.iter().all(|s| s.log_probs[t] == f64::NEG_INFINITY) {
            return Err(Error::NonFinite(format!("every stream gives token {t} probability zero")));
        }
    }
    let k = streams.len();
    let w = vec![1.0 / k as f64; k];
    let ll0 = log_likelihood(streams, &w);
    if streams.iter().all(|s| s.log_probs == streams[0].log_probs) {
        return Ok(EmResult {
            weights: InterpolationWeights(w),
            log_likelihoods: vec![ll0],
            iterations: 0,
            converged: true,
            degenerate: true,
        });
    }
    let mut run = EmRun {
        streams,
        history: vec![ll0],
        iterations: 0,
        buf: Vec::with_capacity(k),
    };
    let (mut w, mut converged) = run.iterate(w);

    let g = mean_ratio(streams, &w, &mut run.buf);
    let snap: Vec<bool> = w.iter().zip(&g).map(|(x, gk)| *x > 0.0 && *x < SNAP_BELOW && *gk < 1.0).collect();
    if snap.iter().any(|&s| s) && snap.iter().zip(&w).any(|(s, x)| !s && *x > 0.0) {
        let kept: f64 = w.iter().zip(&snap).filter(|(_, s)| !**s).map(|(x, _)| x).sum();
        let face: Vec<f64> = w.iter().zip(&snap).map(|(x, s)| if *s { 0.0 } else { x / kept }).collect();
        let saved = (run.history.clone(), run.iterations);
        let before = *run.history.last().expect("non-empty");
        let face_ll = log_likelihood(streams, &face);
        if face_ll >= before {
            run.push(face_ll);
            let (fw, fc) = run.iterate(face);
            let g = mean_ratio(streams, &fw, &mut run.buf);
            let optimal = fw.iter().zip(&g).all(|(x, gk)| *x > 0.0 || *gk <= 1.0 + 1e-12);
            if optimal {
                converged = fc || fw.iter().filter(|x| **x > 0.0).count() == 1;
                w = fw;
            } else {
                (run.history, run.iterations) = saved;
            }
        }
    }
    Ok(EmResult {
        weights: InterpolationWeights(w),
        log_likelihoods: run.history,
        iterations: run.iterations,
        converged,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn constant(label: &str, p: f64, n: usize) -> ProbStream {
        ProbStream::new(label, vec![p.ln(); n]).unwrap()
    }

    fn random_stream(r: &mut ChaCha8Rng, label: &str, n: usize) -> ProbStream {
        ProbStream::new(label, (0..n).map(|_| r.random_range(0.001f64..1.0).ln()).collect()).unwrap()
    }

    #[test]
    fn perplexity_examples() {
        assert!((perplexity(&constant("u", 0.1, 7), 7).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(perplexity(&constant("p", 1.0, 3), 3).unwrap(), 1.0);
        let s = ProbStream::new("m", vec![0.5f64.ln(), 0.25f64.ln()]).unwrap();
        assert!((perplexity(&s, 2).unwrap() - 2.828427).abs() < 1e-6);
        assert!((perplexity(&s, 2).unwrap() - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perplexity_errors() {
        let s = constant("u", 0.1, 3);
        assert!(matches!(perplexity(&s, 4), Err(Error::LengthMismatch(_))));
        let z = ProbStream::new("z", vec![-1.0, f64::NEG_INFINITY]).unwrap();
        assert!(matches!(perplexity(&z, 2), Err(Error::NonFinite(_))));
        assert!(perplexity_of(&[]).is_err());
        assert!(ProbStream::new("bad", vec![0.1]).is_err());
        assert!(ProbStream::new("two words", vec![-0.1]).is_err());
    }

    #[test]
    fn perplexity_ignores_token_order() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let s = random_stream(&mut r, "a", 50);
        let mut rev = s.clone();
        rev.log_probs.reverse();
        let (a, b) = (perplexity(&s, 50).unwrap(), perplexity(&rev, 50).unwrap());
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn interpolation_examples() {
        let (a, b) = (constant("a", 0.5, 4), constant("b", 0.25, 4));
        let m = interpolate(&[a.clone(), b.clone()], &InterpolationWeights::uniform(2)).unwrap();
        for v in &m.log_probs {
            assert!((v.exp() - 0.375).abs() < 1e-15);
        }
        let c = interpolate(&[a.clone(), b.clone()], &InterpolationWeights::new(vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(c.log_probs, a.log_probs);
        assert!(interpolate(&[a, constant("c", 0.5, 3)], &InterpolationWeights::uniform(2)).is_err());
    }

    #[test]
    fn interpolation_matches_probability_domain() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let streams: Vec<ProbStream> = ["a", "b", "c"].iter().map(|l| random_stream(&mut r, l, 100)).collect();
        let raw: Vec<f64> = (0..3).map(|_| r.random_range(0.0..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let w = InterpolationWeights::new(raw.iter().map(|x| x / sum).collect()).unwrap();
        let m = interpolate(&streams, &w).unwrap();
        for t in 0..100 {
            let p: f64 = streams.iter().zip(w.as_slice()).map(|(s, wk)| wk * s.log_probs[t].exp()).sum();
            assert!((m.log_probs[t].exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_weights_reproduce_component_perplexity() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let streams: Vec<ProbStream> = ["a", "b"].iter().map(|l| random_stream(&mut r, l, 40)).collect();
        for k in 0..2 {
            let m = interpolate(&streams, &InterpolationWeights::corner(2, k)).unwrap();
            assert_eq!(perplexity(&m, 40).unwrap(), perplexity(&streams[k], 40).unwrap());
        }
    }

    #[test]
    fn weights_are_validated() {
        assert!(InterpolationWeights::new(vec![0.5, 0.6]).is_err());
        assert!(InterpolationWeights::new(vec![-0.1, 1.1]).is_err());
        assert!(InterpolationWeights::new(vec![f64::NAN, 1.0]).is_err());
        assert!(InterpolationWeights::new(vec![]).is_err());
        assert!(InterpolationWeights::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn em_moves_to_the_dominant_corner() {
        let r = estimate_weights(&[constant("a", 0.4, 30), constant("b", 0.2, 30)]).unwrap();
        assert!(r.converged);
        assert!((r.weights.as_slice()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn em_symmetric_case_stays_even() {
        let a: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 0.9f64 } else { 0.1 }.ln()).collect();
        let b: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 0.1f64 } else { 0.9 }.ln()).collect();
        let r = estimate_weights(&[ProbStream::new("a", a).unwrap(), ProbStream::new("b", b).unwrap()]).unwrap();
        assert!((r.weights.as_slice()[0] - 0.5).abs() < 1e-12);
        assert!((r.weights.as_slice()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn em_flags_identical_streams() {
        let s = constant("a", 0.3, 10);
        let mut t = s.clone();
        t.label = "b".into();
        let r = estimate_weights(&[s, t]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.weights.as_slice(), [0.5, 0.5]);
    }

    #[test]
    fn em_rejects_bad_input() {
        assert!(estimate_weights(&[constant("a", 0.3, 10)]).is_err());
        assert!(estimate_weights(&[constant("a", 0.3, 10), constant("b", 0.3, 9)]).is_err());
    }

    /// A second stream that tracks the first closely, like two models
    /// trained from the same start.
    fn near_copy(r: &mut ChaCha8Rng, base: &ProbStream, shift: f64, noise: f64) -> ProbStream {
        let lp = base
            .log_probs
            .iter()
            .map(|&x| (x + shift + r.random_range(-noise..noise)).min(0.0))
            .collect();
        ProbStream::new("near", lp).unwrap()
    }

    fn grid_best(streams: &[ProbStream]) -> f64 {
        (0..=100)
            .map(|i| log_likelihood(streams, &[i as f64 / 100.0, 1.0 - i as f64 / 100.0]))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn em_handles_near_redundant_streams() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let base = ProbStream::new("a", (0..20_000).map(|_| r.random_range(1e-4f64..0.6).ln()).collect()).unwrap();
        for (shift, noise) in [(-0.02, 0.05), (-0.01, 0.3), (0.0, 0.2), (-0.05, 0.6)] {
            let streams = [base.clone(), near_copy(&mut r, &base, shift, noise)];
            let em = estimate_weights(&streams).unwrap();
            assert!(em.converged, "{shift} {noise} {:?}", em.weights);
            let ll = log_likelihood(&streams, em.weights.as_slice());
            assert!(ll >= grid_best(&streams) - 1e-9, "{shift} {noise} {:?}", em.weights);
            for pair in em.log_likelihoods.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-9);
            }
            let mixed = perplexity_of(&interpolate(&streams, &em.weights).unwrap().log_probs).unwrap();
            let best = streams.iter().map(|s| perplexity_of(&s.log_probs).unwrap()).fold(f64::INFINITY, f64::min);
            assert!(mixed <= best + 1e-6, "{mixed} {best}");
        }
    }

    #[test]
    fn em_beats_every_grid_point_and_is_monotone() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let streams: Vec<ProbStream> = ["a", "b", "c"].iter().map(|l| random_stream(&mut r, l, 200)).collect();
        let em = estimate_weights(&streams).unwrap();
        for pair in em.log_likelihoods.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9);
        }
        let best = log_likelihood(&streams, em.weights.as_slice());
        for i in 0..=100 {
            for j in 0..=(100 - i) {
                let w = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
                assert!(best >= log_likelihood(&streams, &w) - 1e-9, "{w:?}");
            }
        }
    }

    #[test]
    fn estimated_mixture_is_no_worse_than_any_component() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let streams: Vec<ProbStream> = ["a", "b"].iter().map(|l| random_stream(&mut r, l, 300)).collect();
        let em = estimate_weights(&streams).unwrap();
        let mixed = perplexity(&interpolate(&streams, &em.weights).unwrap(), 300).unwrap();
        let best = streams.iter().map(|s| perplexity(s, 300).unwrap()).fold(f64::INFINITY, f64::min);
        assert!(mixed <= best + 1e-6);
    }

    #[test]
    fn stream_file_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut s = random_stream(&mut r, "lstm", 25);
        s.log_probs[3] = 0.0;
        s.log_probs[4] = f64::NEG_INFINITY;
        s.log_probs[5] = -1e-300;
        let p = Path::new("mem");
        let back = ProbStream::parse(&s.to_text(), p).unwrap();
        assert_eq!(back, s);
        assert_eq!(ProbStream::parse(&back.to_text(), p).unwrap().to_text(), s.to_text());
    }

    #[test]
    fn stream_file_errors() {
        let p = Path::new("mem");
        assert!(matches!(ProbStream::parse("", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ProbStream::parse("#hwlm-probs v2 a 1\n-1\n", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ProbStream::parse("#hwlm-probs v1 a 2\n-1\n", p), Err(Error::LengthMismatch(_))));
        assert!(matches!(ProbStream::parse("#hwlm-probs v1 a 2\n-1\nx\n", p), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(ProbStream::parse("#hwlm-probs v1 a 1\n0.5\n", p), Err(Error::Parse { line: 2, .. })));
    }
}
