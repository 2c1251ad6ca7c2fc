//! Synthetic interaction logs driven by Markov regimes that switch at fixed positions.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Interaction;
use crate::error::{Error, Result};

/// Row-stochastic transition table over items `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Regime {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Regime {
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            let total: f64 = row.iter().map(|&(_, p)| p).sum();
            if row.is_empty() || (total - 1.0).abs() > 1e-9 || row.iter().any(|&(j, p)| j >= n || p < 0.0) {
                return Err(Error::Config(vec![format!("transition row {i} is not a distribution")]));
            }
        }
        Ok(Regime { rows })
    }

    /// Deterministic walk `order[0] -> order[1] -> ... -> order[0]`.
    pub fn cycle(order: &[usize], n_items: usize) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n_items).map(|i| vec![((i + 1) % n_items, 1.0)]).collect();
        for (k, &i) in order.iter().enumerate() {
            rows[i] = vec![(order[(k + 1) % order.len()], 1.0)];
        }
        Regime::from_rows(rows)
    }

    /// Each item moves uniformly to `fanout` distinct random successors.
    pub fn random<R: Rng + ?Sized>(n_items: usize, fanout: usize, rng: &mut R) -> Self {
        let fanout = fanout.clamp(1, n_items);
        let p = 1.0 / fanout as f64;
        let rows = (0..n_items)
            .map(|_| sample(rng, n_items, fanout).into_iter().map(|j| (j, p)).collect())
            .collect();
        Regime { rows }
    }

    /// A random permutation split into deterministic cycles of `len` items.
    pub fn short_cycles<R: Rng + ?Sized>(n_items: usize, len: usize, rng: &mut R) -> Self {
        let len = len.clamp(1, n_items);
        let perm = sample(rng, n_items, n_items).into_vec();
        let mut rows = vec![Vec::new(); n_items];
        for chunk in perm.chunks(len) {
            for (k, &i) in chunk.iter().enumerate() {
                rows[i] = vec![(chunk[(k + 1) % chunk.len()], 1.0)];
            }
        }
        Regime { rows }
    }

    pub fn n_items(&self) -> usize {
        self.rows.len()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows[from].iter().filter(|&&(j, _)| j == to).map(|&(_, p)| p).sum()
    }

    pub fn next<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        let row = &self.rows[from];
        let mut u: f64 = rng.random();
        for &(j, p) in row {
            if u < p {
                return j;
            }
            u -= p;
        }
        row[row.len() - 1].0
    }
}

/// Generator description: every user gets `length` events; regime `r + 1`
/// governs the transition into position `switch_points[r]` and later.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeSpec {
    pub users: usize,
    pub length: usize,
    pub regimes: Vec<Regime>,
    pub switch_points: Vec<usize>,
}

impl RegimeSpec {
    pub fn n_items(&self) -> usize {
        self.regimes.first().map_or(0, Regime::n_items)
    }

    /// Regime that produces the item at position `t`.
    pub fn regime_at(&self, t: usize) -> usize {
        self.switch_points.iter().filter(|&&s| t >= s).count()
    }

    fn check(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.regimes.is_empty() {
            problems.push("at least one regime is required".to_string());
        }
        if self.switch_points.len() + 1 != self.regimes.len() {
            problems.push(format!(
                "{} regimes need {} switch points, got {}",
                self.regimes.len(),
                self.regimes.len().saturating_sub(1),
                self.switch_points.len()
            ));
        }
        if !self.switch_points.windows(2).all(|w| w[0] < w[1]) {
            problems.push("switch points must increase".to_string());
        }
        if self.regimes.iter().any(|r| r.n_items() != self.n_items()) {
            problems.push("regimes disagree on the item count".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

pub fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

pub fn user_id(u: usize) -> String {
    format!("u{u:06}")
}

/// Same seed and spec give the same log.
pub fn generate(spec: &RegimeSpec, seed: u64) -> Result<Vec<Interaction>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.users * spec.length);
    for u in 0..spec.users {
        let uid = user_id(u);
        let mut cur = rng.random_range(0..spec.n_items());
        for t in 0..spec.length {
            if t > 0 {
                cur = spec.regimes[spec.regime_at(t)].next(cur, &mut rng);
            }
            out.push(Interaction {
                user_id: uid.clone(),
                item_id: item_id(cur),
                timestamp: 1_600_000_000 + (u * spec.length + t) as u64 * 60,
            });
        }
    }
    Ok(out)
}

pub fn write_log<W: Write>(log: &[Interaction], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "item_id", "timestamp"])?;
    for it in log {
        w.write_record([it.user_id.as_str(), it.item_id.as_str(), &it.timestamp.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
