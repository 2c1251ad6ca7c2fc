//! Full-ranking next-item evaluation: HR@K and NDCG@K.

use std::io::Write;

use rayon::prelude::*;

use crate::config::Mode;
use crate::data::{Segment, SequenceDataset, UserSequence};
use crate::error::{Error, Result};
use crate::model::Model;

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 50];

/// 1-based rank of `target` (a logit column); tied items count as ahead.
pub fn rank_of_target(logits: &[f64], target: usize) -> usize {
    let t = logits[target];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != target && v >= t)
        .count()
        + 1
}

pub fn metrics_at_k(rank: usize, k: usize) -> (f64, f64) {
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub user_id: String,
    pub instances: usize,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub segment: Segment,
    pub cutoffs: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub instances: usize,
    pub per_user: Option<Vec<UserMetrics>>,
}

impl EvalReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|i| self.ndcg[i])
    }

    /// Means in [0, 1], NDCG ≤ HR, and both non-decreasing in K.
    pub fn is_consistent(&self) -> bool {
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        let mut order: Vec<usize> = (0..self.cutoffs.len()).collect();
        order.sort_by_key(|&i| self.cutoffs[i]);
        self.hr.iter().all(unit)
            && self.ndcg.iter().all(unit)
            && self.ndcg.iter().zip(&self.hr).all(|(n, h)| n <= h)
            && order.windows(2).all(|w| {
                self.hr[w[0]] <= self.hr[w[1]] && self.ndcg[w[0]] <= self.ndcg[w[1]]
            })
    }

    /// `segment,metric,cutoff,value,instances` rows after a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["segment", "metric", "cutoff", "value", "instances"])?;
        let seg = self.segment.to_string();
        let n = self.instances.to_string();
        for (metric, values) in [("HR", &self.hr), ("NDCG", &self.ndcg)] {
            for (k, v) in self.cutoffs.iter().zip(values.iter()) {
                w.write_record([seg.as_str(), metric, &k.to_string(), &format!("{v:.6}"), &n])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Logits for each requested position of one user; `positions[i] = p`
/// asks for the scores of item `p` given `items[..p]`.
pub trait Scorer: Sync {
    fn score(&self, user: &UserSequence, positions: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// Model scoring with contexts truncated to `max_context`. Positions that
/// fit in one window share a single causal forward pass.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, user: &UserSequence, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let max = self.model.config().max_context;
        let shared = positions.iter().copied().filter(|&p| p <= max).max().unwrap_or(0);
        let prefix = if shared > 0 {
            Some(self.model.score_window(&user.items[..shared])?)
        } else {
            None
        };
        positions
            .iter()
            .map(|&p| match &prefix {
                Some(l) if p <= max => Ok(l.row(p - 1).to_vec()),
                _ => self.model.predict_scores(&user.items[..p]),
            })
            .collect()
    }
}

impl<F> Scorer for F
where
    F: Fn(&UserSequence, usize) -> Vec<f64> + Sync,
{
    fn score(&self, user: &UserSequence, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(positions.iter().map(|&p| self(user, p)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub cutoffs: Vec<usize>,
    pub per_user: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            per_user: false,
        }
    }
}

/// Ranks every position of `segment` that has a non-empty context.
pub fn evaluate_with(
    ds: &SequenceDataset,
    segment: Segment,
    scorer: &dyn Scorer,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let per_user = ds
        .users
        .par_iter()
        .map(|u| {
            let positions: Vec<usize> = u.segment(segment).filter(|&p| p > 0).collect();
            let mut hr = vec![0.0; opts.cutoffs.len()];
            let mut ndcg = vec![0.0; opts.cutoffs.len()];
            let scores = if positions.is_empty() {
                Vec::new()
            } else {
                scorer.score(u, &positions)?
            };
            for (&p, logits) in positions.iter().zip(&scores) {
                let rank = rank_of_target(logits, u.items[p] - 1);
                for (i, &k) in opts.cutoffs.iter().enumerate() {
                    let (h, n) = metrics_at_k(rank, k);
                    hr[i] += h;
                    ndcg[i] += n;
                }
            }
            Ok(UserMetrics {
                user_id: u.user_id.clone(),
                instances: positions.len(),
                hr,
                ndcg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let instances: usize = per_user.iter().map(|u| u.instances).sum();
    if instances == 0 {
        return Err(Error::EmptySegment(segment.to_string()));
    }
    let mut hr = vec![0.0; opts.cutoffs.len()];
    let mut ndcg = vec![0.0; opts.cutoffs.len()];
    for u in &per_user {
        for i in 0..hr.len() {
            hr[i] += u.hr[i];
            ndcg[i] += u.ndcg[i];
        }
    }
    let n = instances as f64;
    Ok(EvalReport {
        segment,
        cutoffs: opts.cutoffs.clone(),
        hr: hr.into_iter().map(|v| v / n).collect(),
        ndcg: ndcg.into_iter().map(|v| v / n).collect(),
        instances,
        per_user: opts.per_user.then(|| {
            per_user
                .into_iter()
                .map(|mut u| {
                    let c = u.instances.max(1) as f64;
                    u.hr.iter_mut().for_each(|v| *v /= c);
                    u.ndcg.iter_mut().for_each(|v| *v /= c);
                    u
                })
                .collect()
        }),
    })
}

pub fn evaluate(model: &Model, ds: &SequenceDataset, segment: Segment) -> Result<EvalReport> {
    evaluate_with(ds, segment, &ModelScorer { model }, &EvalOptions::default())
}

/// Pre-update inner losses of the first block at every position of
/// `items[..end]`, truncated to the model's context window from the left.
pub fn inner_loss_trace(model: &Model, items: &[usize]) -> Result<Vec<Option<f64>>> {
    let window = &items[items.len().saturating_sub(model.config().max_context)..];
    let (_, losses) = model.infer(window, Mode::Eval)?;
    Ok(losses.into_iter().next().unwrap_or_default())
}
