//! Training loops, warm-start conversion of an LSTM into a highway LSTM, and
//! fine-tuning.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, clip_global_norm, AdamState};
use crate::cells::{with_highways, CellKind};
use crate::corpus::{make_batches_from, TokenStream, EOS_ID};
use crate::error::{Error, Result};
use crate::evaluator::model_perplexity;
use crate::network::{bptt_backward, forward, Batch, LmModel, Mode, INIT_RANGE};
use crate::ops::log_softmax_into;
use crate::par;
use crate::tensor::{Precision, Real};

pub const DEFAULT_CLIP_NORM: f64 = 5.0;
pub const DEFAULT_TRANSFORM_BIAS: f64 = -3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt_len: usize,
    pub dropout_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Heldout evaluation every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Sentences per heldout scoring batch.
    pub eval_batch: usize,
    /// Record zero wall-clock time so logs are reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 10,
            batch_size: 32,
            bptt_len: 35,
            dropout_rate: 0.5,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 1,
            precision: Precision::F32,
            eval_every: 1,
            eval_batch: 64,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        // lr = 0 is accepted: it freezes the parameters, which is useful as a
        // control run.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and ≥ 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} not in [0, 1)", self.dropout_rate));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if self.batch_size == 0 || self.bptt_len == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return bad("batch size, window length, eval interval and eval batch must be positive".into());
        }
        Ok(())
    }
}

/// Training text: one long stream cut into lanes, or independent sentences.
#[derive(Debug, Clone, Copy)]
pub enum TrainText<'a> {
    Stream(&'a TokenStream),
    /// Each sentence is `<s> … </s>`; state resets between sentences.
    Sentences(&'a [Vec<u32>]),
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    /// Fingerprint of the vocabulary both texts were encoded with.
    pub fingerprint: &'a str,
    pub text: TrainText<'a>,
    pub heldout: &'a [Vec<u32>],
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy (nats/token); none for epoch 0.
    pub train_loss: Option<f64>,
    pub heldout_ppl: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// Tab-separated: epoch, train loss, heldout PPL, seconds.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        format!("{}\t{}\t{}\t{:.3}", self.epoch, opt(self.train_loss), opt(self.heldout_ppl), self.seconds)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters with the lowest heldout perplexity seen, epoch 0 included.
    pub best: LmModel<T>,
    pub best_epoch: usize,
    pub best_ppl: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug)]
pub struct Divergence<T> {
    pub epoch: usize,
    pub reason: String,
    /// Best parameters before the failure.
    pub last_good: LmModel<T>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug)]
pub enum TrainError<T> {
    Failed(Error),
    Diverged(Box<Divergence<T>>),
}

impl<T> fmt::Display for TrainError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Failed(e) => e.fmt(f),
            TrainError::Diverged(d) => write!(f, "training diverged at epoch {}: {}", d.epoch, d.reason),
        }
    }
}

impl<T: fmt::Debug> std::error::Error for TrainError<T> {}

impl<T> From<Error> for TrainError<T> {
    fn from(e: Error) -> Self {
        TrainError::Failed(e)
    }
}

impl<T> TrainError<T> {
    /// Flattens into the library error type, dropping the saved model.
    pub fn into_error(self) -> Error {
        match self {
            TrainError::Failed(e) => e,
            TrainError::Diverged(d) => Error::Diverged {
                epoch: d.epoch,
                reason: d.reason,
            },
        }
    }
}

/// Optimizer state for one run.
struct Stepper<'a, T: Real> {
    cfg: &'a TrainConfig,
    adam: AdamState<T>,
}

impl<T: Real> Stepper<'_, T> {
    /// Backprop, clip and update on one window. Returns the summed loss, the
    /// predicted token count and the carried states.
    fn step(&mut self, model: &mut LmModel<T>, batch: &Batch, init: &[crate::cells::CellState<T>], seed: u64) -> Result<(f64, usize, Vec<crate::cells::CellState<T>>)> {
        let mode = if model.arch.dropout_rate > 0.0 { Mode::Train { seed } } else { Mode::Eval };
        let mut out = bptt_backward(model, batch, init, mode)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {}", out.loss)));
        }
        clip_global_norm(&mut out.grads.tensors_mut(), self.cfg.clip_norm);
        let grads: Vec<_> = out.grads.tensors().into_iter().map(|(_, t)| t).collect();
        adam_step(&mut model.tensors_mut(), &grads, &mut self.adam)?;
        Ok((out.loss * out.predicted as f64, out.predicted, out.states))
    }
}

/// Sentences sorted by length into batches of `b`, each cut into windows
/// of at most `l` steps. Padding is masked.
fn sentence_windows(sentences: &[Vec<u32>], b: usize, l: usize) -> Result<Vec<Vec<Batch>>> {
    let mut order: Vec<usize> = (0..sentences.len()).filter(|&i| sentences[i].len() >= 2).collect();
    if order.is_empty() {
        return Err(Error::Empty("no training sentence has a token to predict".into()));
    }
    order.sort_by_key(|&i| sentences[i].len());
    let mut out = Vec::new();
    for group in order.chunks(b) {
        let lanes = group.len();
        let len = group.iter().map(|&i| sentences[i].len() - 1).max().expect("non-empty");
        let mut windows = Vec::new();
        for start in (0..len).step_by(l) {
            let w = l.min(len - start);
            let mut inputs = vec![EOS_ID; lanes * w];
            let mut targets = vec![EOS_ID; lanes * w];
            let mut mask = vec![false; lanes * w];
            for (lane, &i) in group.iter().enumerate() {
                let s = &sentences[i];
                for t in start..(start + w).min(s.len() - 1) {
                    let k = lane * w + t - start;
                    inputs[k] = s[t];
                    targets[k] = s[t + 1];
                    mask[k] = true;
                }
            }
            windows.push(Batch::with_mask(lanes, w, inputs, targets, mask)?);
        }
        out.push(windows);
    }
    Ok(out)
}

fn run_epoch<T: Real>(
    model: &mut LmModel<T>,
    text: TrainText<'_>,
    cfg: &TrainConfig,
    stepper: &mut Stepper<'_, T>,
    rng: &mut ChaCha8Rng,
    sentence_groups: &mut [Vec<Batch>],
) -> Result<f64> {
    let (mut loss_sum, mut tokens) = (0.0, 0usize);
    match text {
        TrainText::Stream(stream) => {
            let offset = rng.random_range(0..cfg.bptt_len);
            let windows = make_batches_from(stream, cfg.batch_size, cfg.bptt_len, offset)
                .or_else(|_| make_batches_from(stream, cfg.batch_size, cfg.bptt_len, 0))?;
            let mut states = model.zero_state(cfg.batch_size);
            for w in &windows {
                let batch = w.to_batch();
                if batch.predicted() == 0 {
                    continue;
                }
                let (l, n, next) = stepper.step(model, &batch, &states, rng.random())?;
                loss_sum += l;
                tokens += n;
                states = next;
            }
        }
        TrainText::Sentences(_) => {
            sentence_groups.shuffle(rng);
            for group in sentence_groups.iter() {
                let mut states = model.zero_state(group[0].lanes);
                for batch in group {
                    if batch.predicted() == 0 {
                        continue;
                    }
                    let (l, n, next) = stepper.step(model, batch, &states, rng.random())?;
                    loss_sum += l;
                    tokens += n;
                    states = next;
                }
            }
        }
    }
    if tokens == 0 {
        return Err(Error::Empty("no training tokens".into()));
    }
    Ok(loss_sum / tokens as f64)
}

/// Trains `model` and returns the parameters with the lowest heldout
/// perplexity. Epoch 0 is the starting point, so the result is never worse
/// than the input on the heldout set.
pub fn train<T: Real>(
    model: LmModel<T>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
    cfg.validate()?;
    let mut model = model;
    if model.vocab_fingerprint.is_empty() {
        model.vocab_fingerprint = data.fingerprint.to_string();
    } else if model.vocab_fingerprint != data.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: model.vocab_fingerprint.clone(),
            found: data.fingerprint.to_string(),
        }
        .into());
    }
    if data.heldout.is_empty() {
        return Err(Error::Empty("heldout set is empty".into()).into());
    }
    model.arch.dropout_rate = cfg.dropout_rate;
    model.validate()?;
    let mut sentence_groups = match data.text {
        TrainText::Sentences(s) => sentence_windows(s, cfg.batch_size, cfg.bptt_len)?,
        TrainText::Stream(_) => Vec::new(),
    };

    let clock = Instant::now();
    let seconds = |c: &Instant| if cfg.deterministic { 0.0 } else { c.elapsed().as_secs_f64() };
    let eval = |m: &LmModel<T>| model_perplexity(m, data.heldout, cfg.eval_batch).map(|(p, _)| p);

    let ppl0 = match eval(&model) {
        Ok(p) => p,
        Err(Error::NonFinite(reason)) => {
            return Err(TrainError::Failed(Error::NonFinite(format!("initial model: {reason}"))));
        }
        Err(e) => return Err(e.into()),
    };
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        heldout_ppl: Some(ppl0),
        seconds: seconds(&clock),
    }];
    on_epoch(&history[0]);
    let mut best = model.clone();
    let (mut best_epoch, mut best_ppl) = (0, ppl0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stepper = Stepper {
        cfg,
        adam: AdamState::new(model.tensors().into_iter().map(|(_, t)| t), cfg.lr),
    };
    for epoch in 1..=cfg.epochs {
        let diverged = |reason: String, best: LmModel<T>, history: Vec<EpochRecord>| {
            TrainError::Diverged(Box::new(Divergence {
                epoch,
                reason,
                last_good: best,
                history,
            }))
        };
        let loss = match run_epoch(&mut model, data.text, cfg, &mut stepper, &mut rng, &mut sentence_groups) {
            Ok(l) => l,
            Err(Error::NonFinite(reason)) => return Err(diverged(reason, best, history)),
            Err(e) => return Err(e.into()),
        };
        let ppl = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            match eval(&model) {
                Ok(p) if p.is_finite() => Some(p),
                Ok(p) => return Err(diverged(format!("heldout perplexity {p}"), best, history)),
                Err(Error::NonFinite(reason)) => return Err(diverged(reason, best, history)),
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            train_loss: Some(loss),
            heldout_ppl: ppl,
            seconds: seconds(&clock),
        };
        on_epoch(&rec);
        history.push(rec);
        if let Some(p) = ppl {
            if p < best_ppl {
                best_ppl = p;
                best_epoch = epoch;
                best = model.clone();
            }
        }
    }
    best.arch.dropout_rate = cfg.dropout_rate;
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_ppl,
        history,
    })
}

/// Continues training a (typically converted) model with fresh optimizer
/// moments. The data must use the model's vocabulary.
pub fn fine_tune<T: Real>(
    model: LmModel<T>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
    if model.vocab_fingerprint != data.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: model.vocab_fingerprint.clone(),
            found: data.fingerprint.to_string(),
        }
        .into());
    }
    train(model, data, cfg, on_epoch)
}

/// Adds `depth` highway layers of the given kind to every recurrent layer of
/// a trained LSTM. Base tensors are copied unchanged; new transform gates
/// start at `transform_bias`.
pub fn convert_to_highway<T: Real>(
    source: &LmModel<T>,
    kind: CellKind,
    depth: usize,
    transform_bias: f64,
    seed: u64,
) -> Result<LmModel<T>> {
    if source.arch.cell_kind != CellKind::Lstm {
        return Err(Error::InvalidArgument(format!(
            "conversion needs an lstm model, got {}",
            source.arch.cell_kind
        )));
    }
    if kind == CellKind::Lstm {
        return Err(Error::InvalidArgument("target variant must be a highway LSTM".into()));
    }
    if depth < 1 {
        return Err(Error::InvalidArgument("highway depth must be ≥ 1".into()));
    }
    if !transform_bias.is_finite() {
        return Err(Error::InvalidArgument(format!("transform bias {transform_bias} is not finite")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = source
        .layers
        .iter()
        .map(|l| with_highways(l.lstm.clone(), kind, depth, &mut rng, INIT_RANGE, transform_bias))
        .collect::<Result<Vec<_>>>()?;
    let mut out = LmModel {
        arch: source.arch.clone().with_cell(kind, depth),
        embedding: source.embedding.clone(),
        layers,
        glu: source.glu.clone(),
        out_w: source.out_w.clone(),
        out_b: source.out_b.clone(),
        vocab_fingerprint: source.vocab_fingerprint.clone(),
    };
    out.arch.full_carry = false;
    out.validate()?;
    Ok(out)
}

/// Mean per-token `KL(p ‖ q)` between two models' next-token distributions
/// over independent sentences.
pub fn mean_kl<T: Real>(p: &LmModel<T>, q: &LmModel<T>, sentences: &[Vec<u32>], batch: usize) -> Result<f64> {
    if p.arch.vocab_size != q.arch.vocab_size {
        return Err(Error::Shape("models have different vocabularies".into()));
    }
    let usable: Vec<&Vec<u32>> = sentences.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Empty("no tokens to compare".into()));
    }
    let groups: Vec<&[&Vec<u32>]> = usable.chunks(batch.max(1)).collect();
    let v = p.arch.vocab_size;
    let parts = par::map(&groups, |group| -> Result<(f64, usize)> {
        let lanes = group.len();
        let len = group.iter().map(|s| s.len() - 1).max().expect("non-empty");
        let mut inputs = vec![EOS_ID; lanes * len];
        for (lane, s) in group.iter().enumerate() {
            inputs[lane * len..lane * len + s.len() - 1].copy_from_slice(&s[..s.len() - 1]);
        }
        let lp = forward(p, lanes, &inputs, &p.zero_state(lanes), Mode::Eval)?.logits;
        let lq = forward(q, lanes, &inputs, &q.zero_state(lanes), Mode::Eval)?.logits;
        let (mut a, mut b) = (vec![T::zero(); v], vec![T::zero(); v]);
        let (mut sum, mut n) = (0.0, 0);
        for (lane, s) in group.iter().enumerate() {
            for t in 0..s.len() - 1 {
                let r = (lane * len + t) * v;
                log_softmax_into(&lp.data()[r..r + v], &mut a);
                log_softmax_into(&lq.data()[r..r + v], &mut b);
                sum += a
                    .iter()
                    .zip(&b)
                    .map(|(&x, &y)| {
                        let x = x.to_f64();
                        x.exp() * (x - y.to_f64())
                    })
                    .sum::<f64>();
                n += 1;
            }
        }
        Ok((sum, n))
    });
    let (mut sum, mut n) = (0.0, 0);
    for part in parts {
        let (s, k) = part?;
        sum += s;
        n += k;
    }
    Ok((sum / n as f64).max(0.0))
}
