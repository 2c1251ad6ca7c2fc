//! Outer-loop training: next-item cross-entropy and Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adam::{AdamConfig, AdamState};
use crate::config::{Mode, TargetMode};
use crate::data::{truncate_context, Segment, SequenceDataset};
use crate::embedding::PAD;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::tensor::Tensor;

/// One training window. `targets[t]` is the item that follows `inputs[t]`,
/// or `None` when position `t` carries no loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl TrainExample {
    pub fn n_targets(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Cuts each user's training segment into windows of at most `max_context`
/// inputs, newest first. With [`TargetMode::Last`] only the newest window is
/// kept and only its final position is supervised.
pub fn training_examples(
    ds: &SequenceDataset,
    max_context: usize,
    targets: TargetMode,
) -> Vec<TrainExample> {
    let mut out = Vec::new();
    for user in &ds.users {
        let seq = &user.items[user.segment(Segment::Train)];
        if seq.len() < 2 {
            continue;
        }
        match targets {
            TargetMode::Last => {
                let inputs = truncate_context(&seq[..seq.len() - 1], max_context).to_vec();
                let mut t = vec![None; inputs.len()];
                t[inputs.len() - 1] = Some(seq[seq.len() - 1]);
                out.push(TrainExample {
                    inputs,
                    targets: t,
                });
            }
            TargetMode::All => {
                let mut end = seq.len();
                while end >= 2 {
                    let start = end.saturating_sub(max_context + 1);
                    out.push(TrainExample {
                        inputs: seq[start..end - 1].to_vec(),
                        targets: seq[start + 1..end].iter().map(|&i| Some(i)).collect(),
                    });
                    end = start + 1;
                    if start == 0 {
                        break;
                    }
                }
            }
        }
    }
    out
}

/// Summed (not averaged) loss and parameter gradients of one window.
#[derive(Debug)]
pub struct ExampleGrad {
    pub loss_sum: f64,
    pub targets: usize,
    pub grads: Vec<Tensor>,
}

pub fn example_gradients<R: Rng + ?Sized>(
    model: &Model,
    ex: &TrainExample,
    mode: Mode,
    rng: &mut R,
) -> Result<ExampleGrad> {
    let mut g = Graph::new().with_check_finite(model.config().check_finite);
    let bound = model.bind(&mut g, true);
    let fwd = model.forward_window(&mut g, &bound, &ex.inputs, mode, rng)?;
    let rows: Vec<usize> = (0..ex.inputs.len()).filter(|&t| ex.targets[t].is_some()).collect();
    let labels: Vec<usize> = rows.iter().map(|&t| ex.targets[t].unwrap_or(1) - 1).collect();
    let picked = if rows.len() == ex.inputs.len() {
        fwd.hidden
    } else {
        let rs = rows
            .iter()
            .map(|&t| g.row(fwd.hidden, t))
            .collect::<Result<Vec<_>>>()?;
        g.stack(&rs)?
    };
    let logits = model.logits(&mut g, &bound, picked)?;
    let loss = g.softmax_cross_entropy_weighted(logits, &labels, 1.0)?;
    let loss_sum = g.value(loss).item();
    if !loss_sum.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let mut grads = g.backward(loss)?;
    let mut out: Vec<Tensor> = bound.vars.iter().map(|&v| grads.take(&g, v)).collect();
    out[model.embedding_index()].row_mut(PAD).fill(0.0);
    Ok(ExampleGrad {
        loss_sum,
        targets: rows.len(),
        grads: out,
    })
}

/// Mean loss over all supervised positions of `examples`, eval mode, no updates.
pub fn mean_loss(model: &Model, examples: &[TrainExample]) -> Result<f64> {
    let parts = examples
        .par_iter()
        .map(|ex| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            example_gradients(model, ex, Mode::Eval, &mut rng).map(|e| (e.loss_sum, e.targets))
        })
        .collect::<Result<Vec<_>>>()?;
    let (s, n) = parts.iter().fold((0.0, 0), |(s, n), p| (s + p.0, n + p.1));
    Ok(s / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over supervised positions, each batch measured before its update.
    pub mean_loss: f64,
    pub batches: usize,
    pub targets: usize,
    /// Per parameter, the largest batch-gradient norm seen this epoch.
    pub grad_norms: Vec<f64>,
}

pub struct Trainer {
    pub examples: Vec<TrainExample>,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(model: &Model, examples: Vec<TrainExample>) -> Self {
        let adam = AdamState::new(
            AdamConfig {
                lr: model.config().eta_outer,
                ..AdamConfig::default()
            },
            model.tensors(),
        );
        Trainer {
            examples,
            adam,
            epochs_done: 0,
        }
    }

    pub fn from_dataset(model: &Model, ds: &SequenceDataset) -> Self {
        let cfg = model.config();
        Trainer::new(model, training_examples(ds, cfg.max_context, cfg.targets))
    }

    /// One pass over the shuffled examples in batches of `batch_size`.
    pub fn epoch(&mut self, model: &mut Model) -> Result<EpochStats> {
        let cfg = model.config().clone();
        let epoch = self.epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = (0..self.examples.len()).map(|_| rng.random()).collect();
        let mut per_example_loss = vec![0.0; self.examples.len()];
        let mut grad_norms = vec![0.0f64; model.tensors().len()];
        let mut total_targets = 0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let frozen: &Model = model;
            let parts = chunk
                .par_iter()
                .map(|&i| {
                    let mut r = ChaCha8Rng::seed_from_u64(seeds[i]);
                    example_gradients(frozen, &self.examples[i], Mode::Train, &mut r)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| if e.is_numerical() { Error::LossDivergence { batch: b } } else { e })?;
            let n: usize = parts.iter().map(|p| p.targets).sum();
            if n == 0 {
                continue;
            }
            let mut sum: Vec<Tensor> = model.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (&i, p) in chunk.iter().zip(&parts) {
                per_example_loss[i] = p.loss_sum;
                for (s, g) in sum.iter_mut().zip(&p.grads) {
                    s.add_assign(g);
                }
            }
            let inv = 1.0 / n as f64;
            for (k, s) in sum.iter_mut().enumerate() {
                *s = s.map(|v| v * inv);
                grad_norms[k] = grad_norms[k].max(s.norm_sq().sqrt());
            }
            self.adam.step(model.tensors_mut(), &sum)?;
            total_targets += n;
            batches += 1;
        }
        self.epochs_done += 1;
        let mean_loss = per_example_loss.iter().sum::<f64>() / total_targets.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::LossDivergence { batch: batches });
        }
        Ok(EpochStats {
            epoch: epoch + 1,
            mean_loss,
            batches,
            targets: total_targets,
            grad_norms,
        })
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: &mut Model,
    ds: &SequenceDataset,
    mut on_epoch: impl FnMut(&EpochStats, &Model),
) -> Result<Vec<EpochStats>> {
    let mut trainer = Trainer::from_dataset(model, ds);
    let mut out = Vec::new();
    for _ in 0..model.config().epochs {
        let stats = trainer.epoch(model)?;
        on_epoch(&stats, model);
        out.push(stats);
    }
    Ok(out)
}
