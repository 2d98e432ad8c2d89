//! The full language model: embeddings, a stack of recurrent layers with
//! residual connections, a GLU fully-connected layer and a softmax output.

mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_any, read_checkpoint, save_checkpoint, write_checkpoint, AnyModel, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{bptt_backward, forward, score_sentences, score_sequence, BackwardOutput, Batch, ForwardOutput, Mode, SequenceScore};

use crate::cells::{with_highways, CellKind, CellParams, CellState, LstmParams};
use crate::error::{Error, Result};
use crate::ops::GluParams;
use crate::tensor::{Real, Tensor};

pub const INIT_RANGE: f64 = 0.05;
pub const FORGET_BIAS: f64 = 1.0;

/// Shape and wiring of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmArchitecture {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub cell_kind: CellKind,
    /// Highway layers per stack; 0 for a plain LSTM.
    pub depth: usize,
    pub dropout_rate: f64,
    pub layer_norm: bool,
    /// Zero-based recurrent layer indices whose input is added to their
    /// output; the value `num_layers` denotes the fully-connected layer.
    pub residual_layers: Vec<usize>,
    /// Separate carry gates instead of `1 − g_T`.
    #[serde(default)]
    pub full_carry: bool,
}

impl LmArchitecture {
    /// Four LSTM layers, residuals on layers 2–4 and the FC layer.
    pub fn new(vocab_size: usize, embedding_dim: usize, hidden_dim: usize) -> Self {
        LmArchitecture {
            vocab_size,
            embedding_dim,
            hidden_dim,
            num_layers: 4,
            cell_kind: CellKind::Lstm,
            depth: 0,
            dropout_rate: 0.5,
            layer_norm: true,
            residual_layers: vec![1, 2, 3, 4],
            full_carry: false,
        }
    }

    pub fn with_cell(mut self, kind: CellKind, depth: usize) -> Self {
        self.cell_kind = kind;
        self.depth = if kind == CellKind::Lstm { 0 } else { depth };
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn residual(&self, layer: usize) -> bool {
        self.residual_layers.contains(&layer)
    }

    pub fn residual_fc(&self) -> bool {
        self.residual(self.num_layers)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size == 0 || self.embedding_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return bad("vocab size, dimensions and layer count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} not in [0, 1)", self.dropout_rate));
        }
        if self.cell_kind != CellKind::Lstm && self.depth == 0 {
            return bad(format!("{} needs depth ≥ 1", self.cell_kind));
        }
        if self.cell_kind == CellKind::Lstm && self.depth != 0 {
            return bad("a plain LSTM has depth 0".into());
        }
        for &r in &self.residual_layers {
            if r == 0 {
                return bad("the first recurrent layer cannot have a residual connection".into());
            }
            if r > self.num_layers {
                return bad(format!("residual index {r} exceeds layer count"));
            }
        }
        Ok(())
    }
}

/// Model parameters plus the architecture they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct LmModel<T> {
    pub arch: LmArchitecture,
    /// `[V × E]`
    pub embedding: Tensor<T>,
    pub layers: Vec<CellParams<T>>,
    /// `H → H`
    pub glu: GluParams<T>,
    /// `[V × H]`
    pub out_w: Tensor<T>,
    /// `[V]`
    pub out_b: Tensor<T>,
    pub vocab_fingerprint: String,
}

impl<T: Real> LmModel<T> {
    /// Fresh model with uniform `±0.05` matrices and a forget-gate bias of 1.
    pub fn new(arch: LmArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e, h) = (arch.vocab_size, arch.embedding_dim, arch.hidden_dim);
        let uniform = |shape: &[usize], rng: &mut ChaCha8Rng| -> Tensor<T> {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| T::c(rng.random_range(-INIT_RANGE..INIT_RANGE))).collect())
                .expect("shape")
        };
        let embedding = uniform(&[v, e], &mut rng);
        let mut layers = Vec::with_capacity(arch.num_layers);
        for k in 0..arch.num_layers {
            let input = if k == 0 { e } else { h };
            let lstm = LstmParams::init(&mut rng, h, input, INIT_RANGE, FORGET_BIAS, arch.layer_norm);
            let mut cell = with_highways(lstm, arch.cell_kind, arch.depth, &mut rng, INIT_RANGE, 0.0)?;
            if arch.full_carry {
                for hw in cell.cell_highways.iter_mut().chain(cell.hidden_highways.iter_mut()) {
                    hw.carry = Some(crate::cells::CarryGate {
                        w_c: uniform(&[h, h], &mut rng),
                        b_c: Tensor::zeros(&[h]),
                    });
                }
            }
            layers.push(cell);
        }
        let glu = GluParams {
            w: uniform(&[h, h], &mut rng),
            b: Tensor::zeros(&[h]),
            v: uniform(&[h, h], &mut rng),
            c: Tensor::zeros(&[h]),
        };
        let out_w = uniform(&[v, h], &mut rng);
        Ok(LmModel {
            arch,
            embedding,
            layers,
            glu,
            out_w,
            out_b: Tensor::zeros(&[v]),
            vocab_fingerprint: String::new(),
        })
    }

    /// Same structure, every tensor zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let (v, e, h) = (self.arch.vocab_size, self.arch.embedding_dim, self.arch.hidden_dim);
        LmModel {
            arch: self.arch.clone(),
            embedding: Tensor::zeros(&[v, e]),
            layers: self.layers.iter().map(CellParams::zeros_like).collect(),
            glu: GluParams::zeros(h, h),
            out_w: Tensor::zeros(&[v, h]),
            out_b: Tensor::zeros(&[v]),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        }
    }

    /// All parameter tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (k, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layer{k}"), &mut out);
        }
        out.push(("fc.w".into(), &self.glu.w));
        out.push(("fc.b".into(), &self.glu.b));
        out.push(("fc.v".into(), &self.glu.v));
        out.push(("fc.c".into(), &self.glu.c));
        out.push(("out.w".into(), &self.out_w));
        out.push(("out.b".into(), &self.out_b));
        out
    }

    /// Mutable tensors in the same order as [`LmModel::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            layer.visit_mut(&mut out);
        }
        out.push(&mut self.glu.w);
        out.push(&mut self.glu.b);
        out.push(&mut self.glu.v);
        out.push(&mut self.glu.c);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        a.validate()?;
        let (v, e, h) = (a.vocab_size, a.embedding_dim, a.hidden_dim);
        self.embedding.ensure_shape(&[v, e], "embedding")?;
        if self.layers.len() != a.num_layers {
            return Err(Error::Shape(format!(
                "{} layers, architecture says {}",
                self.layers.len(),
                a.num_layers
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            let input = if k == 0 { e } else { h };
            if layer.kind != a.cell_kind || layer.depth() != a.depth || layer.hidden() != h || layer.input() != input {
                return Err(Error::Shape(format!("layer {k} does not match the architecture")));
            }
            if layer.lstm.norm.is_some() != a.layer_norm {
                return Err(Error::Shape(format!("layer {k} layer-norm flag mismatch")));
            }
        }
        self.glu.validate()?;
        self.glu.w.ensure_shape(&[h, h], "fc W")?;
        self.out_w.ensure_shape(&[v, h], "output projection")?;
        self.out_b.ensure_shape(&[v], "output bias")?;
        for (name, t) in self.tensors() {
            if let Some(i) = t.first_non_finite() {
                return Err(Error::NonFinite(format!("{name}[{i}]")));
            }
        }
        Ok(())
    }

    /// Zero recurrent state for `batch` rows.
    pub fn zero_state(&self, batch: usize) -> Vec<CellState<T>> {
        (0..self.arch.num_layers)
            .map(|_| CellState::zeros(batch, self.arch.hidden_dim))
            .collect()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> LmModel<U> {
        let mut out = LmModel::<U> {
            arch: self.arch.clone(),
            embedding: self.embedding.cast(),
            layers: Vec::new(),
            glu: GluParams {
                w: self.glu.w.cast(),
                b: self.glu.b.cast(),
                v: self.glu.v.cast(),
                c: self.glu.c.cast(),
            },
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        };
        out.layers = self
            .layers
            .iter()
            .map(|l| {
                let cast_hw = |hw: &crate::cells::HighwayParams<T>| crate::cells::HighwayParams {
                    w_t: hw.w_t.cast(),
                    b_t: hw.b_t.cast(),
                    w: hw.w.cast(),
                    b: hw.b.cast(),
                    carry: hw.carry.as_ref().map(|c| crate::cells::CarryGate {
                        w_c: c.w_c.cast(),
                        b_c: c.b_c.cast(),
                    }),
                };
                CellParams {
                    kind: l.kind,
                    lstm: LstmParams {
                        w_x: l.lstm.w_x.cast(),
                        w_h: l.lstm.w_h.cast(),
                        b: l.lstm.b.cast(),
                        norm: l.lstm.norm.as_ref().map(|n| crate::cells::GateNorm {
                            gain: n.gain.cast(),
                            bias: n.bias.cast(),
                        }),
                    },
                    cell_highways: l.cell_highways.iter().map(cast_hw).collect(),
                    hidden_highways: l.hidden_highways.iter().map(cast_hw).collect(),
                }
            })
            .collect();
        out
    }
}
