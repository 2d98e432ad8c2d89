use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LmModel;
use crate::cells::{CellCache, CellState};
use crate::error::{Error, Result};
use crate::linalg::{add_row_bias, matmul_nn, matmul_nt, matmul_tn_acc, sum_rows_acc};
use crate::ops::{log_softmax_into, softmax_cross_entropy_into, GluCache};
use crate::par;
use crate::tensor::{Real, Tensor};

/// Dropout behaviour of a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Inverted dropout with masks drawn from this seed.
    Train { seed: u64 },
}

/// `lanes × len` token windows, stored lane-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub lanes: usize,
    pub len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// Positions that contribute to the loss.
    pub mask: Vec<bool>,
}

impl Batch {
    /// Every position predicted.
    pub fn new(lanes: usize, len: usize, inputs: Vec<u32>, targets: Vec<u32>) -> Result<Self> {
        let mask = vec![true; inputs.len()];
        Self::with_mask(lanes, len, inputs, targets, mask)
    }

    pub fn with_mask(lanes: usize, len: usize, inputs: Vec<u32>, targets: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        let n = lanes * len;
        if lanes == 0 || len == 0 {
            return Err(Error::Empty("batch needs at least one lane and one step".into()));
        }
        if inputs.len() != n || targets.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "batch {lanes}×{len}: {} inputs, {} targets, {} mask entries",
                inputs.len(),
                targets.len(),
                mask.len()
            )));
        }
        Ok(Batch {
            lanes,
            len,
            inputs,
            targets,
            mask,
        })
    }

    pub fn predicted(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Index in the time-major layout used internally.
    fn tm(&self, lane: usize, t: usize) -> usize {
        t * self.lanes + lane
    }
}

/// Output of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[lanes × len × V]`
    pub logits: Tensor<T>,
    pub states: Vec<CellState<T>>,
}

/// Output of [`bptt_backward`].
#[derive(Debug, Clone)]
pub struct BackwardOutput<T> {
    /// Mean cross-entropy per predicted token (nats).
    pub loss: f64,
    pub predicted: usize,
    pub grads: LmModel<T>,
    /// States after the window, for carrying into the next one.
    pub states: Vec<CellState<T>>,
}

/// Per-token log probabilities of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub token_log_probs: Vec<f64>,
    pub total_log_prob: f64,
    pub num_tokens: usize,
}

struct StepTrace<T> {
    /// Dropout mask applied to this layer's input (None = identity).
    in_mask: Option<Vec<T>>,
    cache: CellCache<T>,
}

struct Trace<T> {
    lanes: usize,
    len: usize,
    /// `[len][layer]`
    steps: Vec<Vec<StepTrace<T>>>,
    fc_mask: Option<Vec<T>>,
    fc_in: Vec<T>,
    glu: GluCache<T>,
    /// Input to the output projection.
    proj_in: Vec<T>,
    logits: Vec<T>,
    states: Vec<CellState<T>>,
}

fn dropout_mask<T: Real>(rng: &mut Option<ChaCha8Rng>, rate: f64, n: usize) -> Option<Vec<T>> {
    let rng = rng.as_mut()?;
    let keep = 1.0 - rate;
    let scale = T::c(1.0 / keep);
    Some(
        (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect(),
    )
}

fn apply_mask<T: Real>(x: &[T], mask: &Option<Vec<T>>) -> Vec<T> {
    match mask {
        None => x.to_vec(),
        Some(m) => x.iter().zip(m).map(|(&a, &b)| a * b).collect(),
    }
}

fn check_inputs<T: Real>(model: &LmModel<T>, lanes: usize, ids: &[&[u32]], states: &[CellState<T>]) -> Result<()> {
    let v = model.arch.vocab_size;
    for list in ids {
        if let Some(&bad) = list.iter().find(|&&id| id as usize >= v) {
            return Err(Error::TokenOutOfRange {
                id: bad as usize,
                vocab: v,
            });
        }
    }
    if states.len() != model.arch.num_layers {
        return Err(Error::Shape(format!(
            "{} layer states for {} layers",
            states.len(),
            model.arch.num_layers
        )));
    }
    for s in states {
        if s.c.rows() != lanes || s.c.cols() != model.arch.hidden_dim || s.h.shape() != s.c.shape() {
            return Err(Error::Shape(format!(
                "state {:?}, expected [{lanes}, {}]",
                s.c.shape(),
                model.arch.hidden_dim
            )));
        }
    }
    Ok(())
}

fn run_forward<T: Real>(model: &LmModel<T>, batch: &Batch, init: &[CellState<T>], mode: Mode) -> Trace<T> {
    let arch = &model.arch;
    let (b, l) = (batch.lanes, batch.len);
    let (e, h, v) = (arch.embedding_dim, arch.hidden_dim, arch.vocab_size);
    let mut rng = match mode {
        Mode::Train { seed } if arch.dropout_rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let rate = arch.dropout_rate;

    let mut c_state: Vec<Vec<T>> = init.iter().map(|s| s.c.data().to_vec()).collect();
    let mut h_state: Vec<Vec<T>> = init.iter().map(|s| s.h.data().to_vec()).collect();
    let mut steps = Vec::with_capacity(l);
    let mut top = Vec::with_capacity(l * b * h);
    for t in 0..l {
        let mut emb = vec![T::zero(); b * e];
        for lane in 0..b {
            let id = batch.inputs[lane * l + t] as usize;
            emb[lane * e..(lane + 1) * e].copy_from_slice(model.embedding.row(id));
        }
        let mut layer_out = emb;
        let mut per_layer = Vec::with_capacity(arch.num_layers);
        for (k, cell) in model.layers.iter().enumerate() {
            let in_mask = dropout_mask(&mut rng, rate, layer_out.len());
            let x = apply_mask(&layer_out, &in_mask);
            let cache = cell.forward(&x, b, &c_state[k], &h_state[k]);
            c_state[k].copy_from_slice(&cache.c);
            h_state[k].copy_from_slice(&cache.h);
            let mut out = cache.h.clone();
            if arch.residual(k) {
                for (o, &r) in out.iter_mut().zip(&layer_out) {
                    *o += r;
                }
            }
            per_layer.push(StepTrace { in_mask, cache });
            layer_out = out;
        }
        top.extend_from_slice(&layer_out);
        steps.push(per_layer);
    }

    let rows = l * b;
    let fc_mask = dropout_mask(&mut rng, rate, rows * h);
    let fc_in = apply_mask(&top, &fc_mask);
    let (mut proj_in, glu) = model.glu.forward(&fc_in, rows);
    if arch.residual_fc() {
        for (o, &z) in proj_in.iter_mut().zip(&top) {
            *o += z;
        }
    }
    let mut logits = vec![T::zero(); rows * v];
    matmul_nt(&proj_in, model.out_w.data(), &mut logits, rows, h, v, T::zero());
    add_row_bias(&mut logits, model.out_b.data());

    let states = c_state
        .into_iter()
        .zip(h_state)
        .map(|(c, hh)| CellState {
            c: Tensor::from_vec(&[b, h], c).expect("state shape"),
            h: Tensor::from_vec(&[b, h], hh).expect("state shape"),
        })
        .collect();
    Trace {
        lanes: b,
        len: l,
        steps,
        fc_mask,
        fc_in,
        glu,
        proj_in,
        logits,
        states,
    }
}

/// Runs the model over `lanes × len` input ids (lane-major) from the given
/// per-layer states. Targets are not needed.
pub fn forward<T: Real>(
    model: &LmModel<T>,
    lanes: usize,
    inputs: &[u32],
    states: &[CellState<T>],
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    if lanes == 0 || inputs.is_empty() || inputs.len() % lanes != 0 {
        return Err(Error::Shape(format!("{} inputs for {lanes} lanes", inputs.len())));
    }
    let len = inputs.len() / lanes;
    check_inputs(model, lanes, &[inputs], states)?;
    let batch = Batch::new(lanes, len, inputs.to_vec(), vec![0; inputs.len()])?;
    let trace = run_forward(model, &batch, states, mode);
    let v = model.arch.vocab_size;
    let mut logits = vec![T::zero(); lanes * len * v];
    for lane in 0..lanes {
        for t in 0..len {
            let src = batch.tm(lane, t) * v;
            let dst = (lane * len + t) * v;
            logits[dst..dst + v].copy_from_slice(&trace.logits[src..src + v]);
        }
    }
    Ok(ForwardOutput {
        logits: Tensor::from_vec(&[lanes, len, v], logits)?,
        states: trace.states,
    })
}

/// Loss and gradients over one window with truncated backpropagation
/// through time. `init` is treated as a constant.
pub fn bptt_backward<T: Real>(model: &LmModel<T>, batch: &Batch, init: &[CellState<T>], mode: Mode) -> Result<BackwardOutput<T>> {
    check_inputs(model, batch.lanes, &[&batch.inputs, &batch.targets], init)?;
    let predicted = batch.predicted();
    if predicted == 0 {
        return Err(Error::Empty("batch has no predicted positions".into()));
    }
    let arch = &model.arch;
    let (b, l) = (batch.lanes, batch.len);
    let (e, h, v) = (arch.embedding_dim, arch.hidden_dim, arch.vocab_size);
    let rows = b * l;
    let trace = run_forward(model, batch, init, mode);
    let mut grads = model.zeros_like();

    // Output layer over all positions at once.
    let scale = T::c(1.0 / predicted as f64);
    let mut dlogits = vec![T::zero(); rows * v];
    let mut loss_sum = 0.0f64;
    for lane in 0..b {
        for t in 0..l {
            let i = lane * l + t;
            if !batch.mask[i] {
                continue;
            }
            let r = batch.tm(lane, t);
            let target = batch.targets[i] as usize;
            let lrow = &trace.logits[r * v..(r + 1) * v];
            let grow = &mut dlogits[r * v..(r + 1) * v];
            loss_sum += softmax_cross_entropy_into(lrow, target, scale, grow).to_f64();
        }
    }
    let loss = loss_sum / predicted as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    matmul_tn_acc(&dlogits, &trace.proj_in, grads.out_w.data_mut(), rows, v, h);
    sum_rows_acc(&dlogits, grads.out_b.data_mut());
    let mut dproj = vec![T::zero(); rows * h];
    matmul_nn(&dlogits, model.out_w.data(), &mut dproj, rows, v, h, T::zero());
    drop(dlogits);

    let dfc_in = model.glu.backward(&trace.fc_in, rows, &trace.glu, &dproj, &mut grads.glu);
    let mut dtop = apply_mask(&dfc_in, &trace.fc_mask);
    if arch.residual_fc() {
        for (d, &g) in dtop.iter_mut().zip(&dproj) {
            *d += g;
        }
    }

    let nl = arch.num_layers;
    let mut dh_next: Vec<Vec<T>> = vec![vec![T::zero(); b * h]; nl];
    let mut dc_next: Vec<Vec<T>> = vec![vec![T::zero(); b * h]; nl];
    for t in (0..trace.len).rev() {
        let mut d_out = dtop[t * b * h..(t + 1) * b * h].to_vec();
        for k in (0..nl).rev() {
            let step = &trace.steps[t][k];
            let mut d_cell_h = d_out.clone();
            for (d, &n) in d_cell_h.iter_mut().zip(&dh_next[k]) {
                *d += n;
            }
            let (dx, dhp, dcp) = model.layers[k].backward(&step.cache, &d_cell_h, &dc_next[k], &mut grads.layers[k]);
            dh_next[k] = dhp;
            dc_next[k] = dcp;
            let mut d_in = apply_mask(&dx, &step.in_mask);
            if arch.residual(k) {
                for (d, &g) in d_in.iter_mut().zip(&d_out) {
                    *d += g;
                }
            }
            d_out = d_in;
        }
        // d_out is now the gradient w.r.t. the embedding rows at step t.
        let demb = grads.embedding.data_mut();
        for lane in 0..b {
            let id = batch.inputs[lane * l + t] as usize;
            for (g, &d) in demb[id * e..(id + 1) * e].iter_mut().zip(&d_out[lane * e..(lane + 1) * e]) {
                *g += d;
            }
        }
    }
    debug_assert_eq!(trace.lanes, b);

    Ok(BackwardOutput {
        loss,
        predicted,
        grads,
        states: trace.states,
    })
}

/// Scores one sentence (already wrapped in `<s> … </s>`) from a zero state.
pub fn score_sequence<T: Real>(model: &LmModel<T>, ids: &[u32]) -> Result<SequenceScore> {
    let mut scores = score_sentences(model, &[ids.to_vec()], 1)?;
    Ok(scores.pop().expect("one sentence"))
}

/// Scores independent sentences, `batch` at a time, each from a zero state.
/// The first id of each sentence is context only and is not predicted.
pub fn score_sentences<T: Real>(model: &LmModel<T>, sentences: &[Vec<u32>], batch: usize) -> Result<Vec<SequenceScore>> {
    let v = model.arch.vocab_size;
    for s in sentences {
        if s.len() < 2 {
            return Err(Error::Empty("sentence needs a context token and at least one prediction".into()));
        }
        if let Some(&bad) = s.iter().find(|&&id| id as usize >= v) {
            return Err(Error::TokenOutOfRange {
                id: bad as usize,
                vocab: v,
            });
        }
    }
    let groups: Vec<&[Vec<u32>]> = sentences.chunks(batch.max(1)).collect();
    let scored = par::map(&groups, |group| score_group(model, group));
    let mut out = Vec::with_capacity(sentences.len());
    for g in scored {
        out.extend(g);
    }
    Ok(out)
}

fn score_group<T: Real>(model: &LmModel<T>, group: &[Vec<u32>]) -> Vec<SequenceScore> {
    let v = model.arch.vocab_size;
    let lanes = group.len();
    let len = group.iter().map(|s| s.len() - 1).max().unwrap_or(1);
    let mut inputs = vec![0u32; lanes * len];
    let mut targets = vec![0u32; lanes * len];
    let mut mask = vec![false; lanes * len];
    for (lane, s) in group.iter().enumerate() {
        for t in 0..s.len() - 1 {
            inputs[lane * len + t] = s[t];
            targets[lane * len + t] = s[t + 1];
            mask[lane * len + t] = true;
        }
    }
    let batch = Batch::with_mask(lanes, len, inputs, targets, mask).expect("well-formed batch");
    let trace = run_forward(model, &batch, &model.zero_state(lanes), Mode::Eval);
    let mut lp = vec![T::zero(); v];
    group
        .iter()
        .enumerate()
        .map(|(lane, s)| {
            let token_log_probs: Vec<f64> = (0..s.len() - 1)
                .map(|t| {
                    let r = batch.tm(lane, t);
                    log_softmax_into(&trace.logits[r * v..(r + 1) * v], &mut lp);
                    lp[s[t + 1] as usize].to_f64().min(0.0)
                })
                .collect();
            SequenceScore {
                total_log_prob: token_log_probs.iter().sum(),
                num_tokens: token_log_probs.len(),
                token_log_probs,
            }
        })
        .collect()
}
