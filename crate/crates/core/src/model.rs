//! Embedding → residual blocks → prediction head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    residual_block, BlockOptions, BlockParams, FfnParams, MambaSeqParams, SeqParams,
    TransformerSeqParams,
};
use crate::config::{Backbone, InnerKind, Mode, ModelConfig};
use crate::embedding::{embed_forward, EmbedOptions, EmbeddingParams, RopeConfig, PAD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::ttt::{TttState, ViewProjections};

/// Every parameter slot of the model, generic over storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: EmbeddingParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// `[n_items × D]`; `None` when tied to the embedding table.
    pub head: Option<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            embedding: self.embedding.map(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            head: self.head.as_ref().map(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: ModelParams<usize>,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
    std: f64,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize]) -> usize {
        let t = Tensor::randn(shape, self.std, self.rng);
        self.push(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, Tensor::full(shape, 1.0))
    }

    /// Identity tap at the newest position plus small noise.
    fn conv(&mut self, name: String, width: usize, d: usize) -> usize {
        let mut t = Tensor::randn(&[width, d], self.std, self.rng);
        for v in t.row_mut(width - 1) {
            *v += 1.0;
        }
        self.push(name, t)
    }

    fn inner_state(&mut self, prefix: &str, cfg: &ModelConfig) -> TttState<usize> {
        let d = cfg.d_model;
        match cfg.inner {
            InnerKind::Linear => TttState::Linear {
                w: self.zeros(format!("{prefix}.w0"), &[d, d]),
            },
            InnerKind::Mlp => TttState::Mlp {
                w1: self.normal(format!("{prefix}.w0.w1"), &[cfg.inner_hidden, d]),
                w2: self.normal(format!("{prefix}.w0.w2"), &[d, cfg.inner_hidden]),
            },
        }
    }
}

/// Output of one window's forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `[n×D]` representations; padding rows are zero.
    pub hidden: Var,
    /// Per block, the inner loss before each position's update.
    pub inner_losses: Vec<Vec<Option<f64>>>,
}

/// Model parameters inserted into a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: ModelParams<Var>,
    pub vars: Vec<Var>,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
            std: config.init_std,
        };
        let d = config.d_model;
        let table = {
            let mut t = Tensor::randn(&[config.n_items + 1, d], b.std, b.rng);
            t.row_mut(PAD).fill(0.0);
            b.push("embedding.items".into(), t)
        };
        let embedding = EmbeddingParams {
            table,
            ln_gain: b.ones("embedding.ln.gain".into(), &[d]),
            ln_bias: b.zeros("embedding.ln.bias".into(), &[d]),
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let p = format!("blocks.{i}");
            let ln1_gain = b.ones(format!("{p}.ln1.gain"), &[d]);
            let ln1_bias = b.zeros(format!("{p}.ln1.bias"), &[d]);
            let seq = match config.backbone {
                Backbone::Transformer => SeqParams::Transformer(TransformerSeqParams {
                    proj: ViewProjections {
                        theta_k: b.normal(format!("{p}.seq.theta_k"), &[d, d]),
                        theta_v: b.normal(format!("{p}.seq.theta_v"), &[d, d]),
                        theta_q: b.normal(format!("{p}.seq.theta_q"), &[d, d]),
                    },
                    w0: b.inner_state(&format!("{p}.seq"), &config),
                    ln_gain: b.ones(format!("{p}.seq.ln.gain"), &[d]),
                    ln_bias: b.zeros(format!("{p}.seq.ln.bias"), &[d]),
                }),
                Backbone::Mamba => SeqParams::Mamba(MambaSeqParams {
                    theta_kq: b.normal(format!("{p}.seq.theta_kq"), &[d, d]),
                    theta_v: b.normal(format!("{p}.seq.theta_v"), &[d, d]),
                    conv_k: b.conv(format!("{p}.seq.conv_k"), config.conv_kernel, d),
                    conv_q: b.conv(format!("{p}.seq.conv_q"), config.conv_kernel, d),
                    theta_g: b.normal(format!("{p}.seq.theta_g"), &[d, d]),
                    out_proj: b.normal(format!("{p}.seq.out_proj"), &[d, d]),
                    w0: b.inner_state(&format!("{p}.seq"), &config),
                    ln_gain: b.ones(format!("{p}.seq.ln.gain"), &[d]),
                    ln_bias: b.zeros(format!("{p}.seq.ln.bias"), &[d]),
                }),
            };
            let ln2_gain = b.ones(format!("{p}.ln2.gain"), &[d]);
            let ln2_bias = b.zeros(format!("{p}.ln2.bias"), &[d]);
            let wide = config.ffn_mult * d;
            let ffn = FfnParams {
                w1: b.normal(format!("{p}.ffn.w1"), &[wide, d]),
                b1: b.zeros(format!("{p}.ffn.b1"), &[wide]),
                w2: b.normal(format!("{p}.ffn.w2"), &[d, wide]),
                b2: b.zeros(format!("{p}.ffn.b2"), &[d]),
            };
            blocks.push(BlockParams {
                ln1_gain,
                ln1_bias,
                seq,
                ln2_gain,
                ln2_bias,
                ffn,
            });
        }
        let head = (!config.tie_prediction)
            .then(|| b.normal("head.items".into(), &[config.n_items, d]));
        let Builder { names, tensors, .. } = b;
        Ok(Model {
            config,
            names,
            tensors,
            layout: ModelParams {
                embedding,
                blocks,
                head,
            },
        })
    }

    /// Replaces parameter values; shapes must match the layout.
    pub fn with_tensors(mut self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Shape {
                op: "with_tensors",
                lhs: vec![self.tensors.len()],
                rhs: vec![tensors.len()],
            });
        }
        for (old, new) in self.tensors.iter().zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::Shape {
                    op: "with_tensors",
                    lhs: old.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
        }
        self.tensors = tensors;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes hyperparameters that do not affect parameter shapes.
    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn layout(&self) -> &ModelParams<usize> {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Index of the embedding table within [`Model::tensors`].
    pub fn embedding_index(&self) -> usize {
        self.layout.embedding.table
    }

    /// Rounds every parameter through `f32`, the checkpoint storage type.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.round_to_f32();
        }
    }

    /// Inserts the parameters into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            params: self.layout.map(&mut |&i| vars[i]),
            vars,
        }
    }

    /// Forward pass over one left-padded window of item indices (0 = padding).
    pub fn forward_window<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        items: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let mask: Vec<bool> = items.iter().map(|&i| i != PAD).collect();
        let opts = EmbedOptions {
            rope: RopeConfig { mu: cfg.rope_mu },
            dropout: cfg.dropout,
            training: mode == Mode::Train,
            ln_eps: cfg.ln_eps,
        };
        let mut h = embed_forward(g, &bound.params.embedding, items, &opts, rng)?;
        let block_opts = BlockOptions {
            eta: cfg.effective_eta(mode),
            ln_eps: cfg.ln_eps,
        };
        let mut inner_losses = Vec::with_capacity(cfg.blocks);
        for block in &bound.params.blocks {
            let out = residual_block(g, h, block, block_opts, &mask)?;
            h = out.out;
            inner_losses.push(out.inner_losses);
        }
        Ok(Forward {
            hidden: h,
            inner_losses,
        })
    }

    /// Left-pads `batch` to a common length and runs every window.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[Vec<usize>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<Forward>> {
        let n = batch.iter().map(Vec::len).max().unwrap_or(0);
        batch
            .iter()
            .map(|seq| {
                let padded = left_pad(seq, n);
                self.forward_window(g, bound, &padded, mode, rng)
            })
            .collect()
    }

    /// The prediction matrix, `[n_items × D]`.
    pub fn head_matrix(&self, g: &mut Graph, bound: &Bound) -> Result<Var> {
        match bound.params.head {
            Some(m) => Ok(m),
            None => {
                let idx: Vec<usize> = (1..=self.config.n_items).collect();
                g.gather(bound.params.embedding.table, &idx)
            }
        }
    }

    /// Logits `[rows × n_items]`; column `j` scores item index `j + 1`.
    pub fn logits(&self, g: &mut Graph, bound: &Bound, hidden: Var) -> Result<Var> {
        let m = self.head_matrix(g, bound)?;
        g.matmul_nt(hidden, m)
    }

    /// Eval-mode hidden states and inner losses for one window, no gradients.
    pub fn infer(&self, items: &[usize], mode: Mode) -> Result<(Tensor, Vec<Vec<Option<f64>>>)> {
        let mut g = Graph::new().with_check_finite(self.config.check_finite);
        let bound = self.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let fwd = self.forward_window(&mut g, &bound, items, mode, &mut rng)?;
        Ok((g.value(fwd.hidden).clone(), fwd.inner_losses))
    }

    /// Eval-mode logits for every position of a window.
    pub fn score_window(&self, items: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new().with_check_finite(self.config.check_finite);
        let bound = self.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let fwd = self.forward_window(&mut g, &bound, items, Mode::Eval, &mut rng)?;
        let logits = self.logits(&mut g, &bound, fwd.hidden)?;
        Ok(g.value(logits).clone())
    }

    /// Next-item logits after the most recent item of `items`.
    pub fn predict_scores(&self, items: &[usize]) -> Result<Vec<f64>> {
        let window = &items[items.len().saturating_sub(self.config.max_context)..];
        let logits = self.score_window(window)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

/// `logits = M · h` for one representation.
pub fn predict_scores(hidden: &[f64], head: &Tensor) -> Vec<f64> {
    (0..head.rows())
        .map(|r| head.row(r).iter().zip(hidden).map(|(a, b)| a * b).sum())
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn left_pad(seq: &[usize], n: usize) -> Vec<usize> {
    let mut out = vec![PAD; n.saturating_sub(seq.len())];
    out.extend_from_slice(seq);
    out
}
