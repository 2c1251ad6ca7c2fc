//! Item embeddings with rotary positions, dropout and layer normalization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{rope_frequencies, Graph, Var};

/// Item index reserved for left padding.
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    /// Rotation factor; pair `j` turns by `mu^(-2j/D)` radians per position.
    pub mu: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        RopeConfig { mu: 1000.0 }
    }
}

impl RopeConfig {
    pub fn frequencies(&self, dim: usize) -> Vec<f64> {
        rope_frequencies(dim, self.mu)
    }
}

/// Embedding parameters, generic over storage (`usize` slots or graph `Var`s).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams<T> {
    /// `[n_items + 1, D]`, row [`PAD`] all zeros.
    pub table: T,
    pub ln_gain: T,
    pub ln_bias: T,
}

impl<T> EmbeddingParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EmbeddingParams<U> {
        EmbeddingParams {
            table: f(&self.table),
            ln_gain: f(&self.ln_gain),
            ln_bias: f(&self.ln_bias),
        }
    }
}

pub fn embed_lookup(g: &mut Graph, table: Var, items: &[usize]) -> Result<Var> {
    g.gather(table, items)
}

pub fn rope_apply(g: &mut Graph, e: Var, positions: &[usize], cfg: RopeConfig) -> Result<Var> {
    g.rope(e, positions, cfg.mu)
}

/// Rotary positions for a left-padded window: valid rows count from 0 at
/// the first real item, padding rows get 0.
pub fn window_positions(items: &[usize]) -> Vec<usize> {
    let mut next = 0;
    items
        .iter()
        .map(|&i| {
            if i == PAD {
                0
            } else {
                next += 1;
                next - 1
            }
        })
        .collect()
}

pub struct EmbedOptions {
    pub rope: RopeConfig,
    pub dropout: f64,
    pub training: bool,
    pub ln_eps: f64,
}

/// `LayerNorm(Dropout(RoPE(E[items])))` with padding rows forced to zero.
pub fn embed_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    params: &EmbeddingParams<Var>,
    items: &[usize],
    opts: &EmbedOptions,
    rng: &mut R,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Dataset("empty item window".into()));
    }
    let keep: Vec<bool> = items.iter().map(|&i| i != PAD).collect();
    let e = embed_lookup(g, params.table, items)?;
    let rot = rope_apply(g, e, &window_positions(items), opts.rope)?;
    let dropped = g.dropout(rot, opts.dropout, opts.training, rng)?;
    let h = g.layer_norm(dropped, params.ln_gain, params.ln_bias, opts.ln_eps)?;
    g.mask_rows(h, &keep)
}
