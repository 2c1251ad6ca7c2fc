//! Residual blocks around the TTT layer.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ttt::{ttt_scan, TttState, ViewProjections};

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    /// `[mult·D × D]`
    pub w1: T,
    pub b1: T,
    /// `[D × mult·D]`
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerSeqParams<T> {
    pub proj: ViewProjections<T>,
    pub w0: TttState<T>,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaSeqParams<T> {
    /// Shared projection feeding both the key and the query convolutions.
    pub theta_kq: T,
    pub theta_v: T,
    /// `[width × D]` causal kernels.
    pub conv_k: T,
    pub conv_q: T,
    pub theta_g: T,
    pub out_proj: T,
    pub w0: TttState<T>,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SeqParams<T> {
    Transformer(TransformerSeqParams<T>),
    Mamba(MambaSeqParams<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub seq: SeqParams<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ffn: FfnParams<T>,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        let seq = match &self.seq {
            SeqParams::Transformer(p) => SeqParams::Transformer(TransformerSeqParams {
                proj: ViewProjections {
                    theta_k: f(&p.proj.theta_k),
                    theta_v: f(&p.proj.theta_v),
                    theta_q: f(&p.proj.theta_q),
                },
                w0: p.w0.map(f),
                ln_gain: f(&p.ln_gain),
                ln_bias: f(&p.ln_bias),
            }),
            SeqParams::Mamba(p) => SeqParams::Mamba(MambaSeqParams {
                theta_kq: f(&p.theta_kq),
                theta_v: f(&p.theta_v),
                conv_k: f(&p.conv_k),
                conv_q: f(&p.conv_q),
                theta_g: f(&p.theta_g),
                out_proj: f(&p.out_proj),
                w0: p.w0.map(f),
                ln_gain: f(&p.ln_gain),
                ln_bias: f(&p.ln_bias),
            }),
        };
        BlockParams {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            seq,
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            ffn: FfnParams {
                w1: f(&self.ffn.w1),
                b1: f(&self.ffn.b1),
                w2: f(&self.ffn.w2),
                b2: f(&self.ffn.b2),
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOptions {
    /// Inner learning rate in effect for this pass.
    pub eta: f64,
    pub ln_eps: f64,
}

#[derive(Debug)]
pub struct SeqOutput {
    pub y: Var,
    pub inner_losses: Vec<Option<f64>>,
}

/// Project, scan, then layer-normalize the scan output.
pub fn seq_block_transformer(
    g: &mut Graph,
    x: Var,
    p: &TransformerSeqParams<Var>,
    opts: BlockOptions,
    mask: &[bool],
) -> Result<SeqOutput> {
    let keys = g.matmul_nt(x, p.proj.theta_k)?;
    let values = g.matmul_nt(x, p.proj.theta_v)?;
    let queries = g.matmul_nt(x, p.proj.theta_q)?;
    let scan = ttt_scan(g, keys, values, queries, &p.w0, opts.eta, mask)?;
    let y = g.layer_norm(scan.outputs, p.ln_gain, p.ln_bias, opts.ln_eps)?;
    Ok(SeqOutput {
        y,
        inner_losses: scan.losses,
    })
}

/// Gate applied to the normalized scan output in the Mamba block.
#[derive(Clone, Copy, Debug)]
pub enum Gate {
    /// `gelu(θ_g · x)`
    Learned,
    /// A fixed `[n×D]` tensor supplied by the caller.
    Forced(Var),
}

pub fn seq_block_mamba(
    g: &mut Graph,
    x: Var,
    p: &MambaSeqParams<Var>,
    opts: BlockOptions,
    mask: &[bool],
) -> Result<SeqOutput> {
    seq_block_mamba_gated(g, x, p, opts, mask, Gate::Learned)
}

/// Shared projection into two causal convolutions for keys and queries,
/// scan, then `out_proj(LayerNorm(y) ⊙ gate)`.
pub fn seq_block_mamba_gated(
    g: &mut Graph,
    x: Var,
    p: &MambaSeqParams<Var>,
    opts: BlockOptions,
    mask: &[bool],
    gate: Gate,
) -> Result<SeqOutput> {
    let shared = g.matmul_nt(x, p.theta_kq)?;
    let shared = g.mask_rows(shared, mask)?;
    let keys = g.causal_conv1d(shared, p.conv_k)?;
    let queries = g.causal_conv1d(shared, p.conv_q)?;
    let values = g.matmul_nt(x, p.theta_v)?;
    let scan = ttt_scan(g, keys, values, queries, &p.w0, opts.eta, mask)?;
    let normed = g.layer_norm(scan.outputs, p.ln_gain, p.ln_bias, opts.ln_eps)?;
    let gate = match gate {
        Gate::Learned => {
            let pre = g.matmul_nt(x, p.theta_g)?;
            g.gelu(pre)?
        }
        Gate::Forced(v) => v,
    };
    let gated = g.mul(normed, gate)?;
    let y = g.matmul_nt(gated, p.out_proj)?;
    Ok(SeqOutput {
        y,
        inner_losses: scan.losses,
    })
}

/// Two dense layers with GELU in between.
pub fn ffn(g: &mut Graph, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let h = g.matmul_nt(x, p.w1)?;
    let h = g.add_bias(h, p.b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul_nt(h, p.w2)?;
    g.add_bias(o, p.b2)
}

#[derive(Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub inner_losses: Vec<Option<f64>>,
}

/// `h = x + seq(LN(x))`, `out = h + FFN(LN(h))`, padding rows zeroed.
pub fn residual_block(
    g: &mut Graph,
    x: Var,
    p: &BlockParams<Var>,
    opts: BlockOptions,
    mask: &[bool],
) -> Result<BlockOutput> {
    let a = g.layer_norm(x, p.ln1_gain, p.ln1_bias, opts.ln_eps)?;
    let a = g.mask_rows(a, mask)?;
    let seq = match &p.seq {
        SeqParams::Transformer(sp) => seq_block_transformer(g, a, sp, opts, mask)?,
        SeqParams::Mamba(sp) => seq_block_mamba(g, a, sp, opts, mask)?,
    };
    let h = g.add(x, seq.y)?;
    let b = g.layer_norm(h, p.ln2_gain, p.ln2_bias, opts.ln_eps)?;
    let f = ffn(g, b, &p.ffn)?;
    let out = g.add(h, f)?;
    let out = g.mask_rows(out, mask)?;
    Ok(BlockOutput {
        out,
        inner_losses: seq.inner_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 4;

    fn opts(eta: f64) -> BlockOptions {
        BlockOptions { eta, ln_eps: 1e-5 }
    }

    fn ones(g: &mut Graph) -> Var {
        g.constant(Tensor::full(&[D], 1.0))
    }

    fn zeros(g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[D]))
    }

    #[test]
    fn identity_transformer_block_is_layer_norm() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.constant(Tensor::randn(&[3, D], 1.0, &mut rng));
        let eye = g.constant(Tensor::eye(D));
        let p = TransformerSeqParams {
            proj: ViewProjections {
                theta_k: eye,
                theta_v: eye,
                theta_q: eye,
            },
            w0: TttState::Linear { w: eye },
            ln_gain: ones(&mut g),
            ln_bias: zeros(&mut g),
        };
        let out = seq_block_transformer(&mut g, x, &p, opts(0.0), &[true; 3]).unwrap();
        let (gain, bias) = (ones(&mut g), zeros(&mut g));
        let ln = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(out.y), g.value(ln));
    }

    fn random_mamba(g: &mut Graph, rng: &mut ChaCha8Rng) -> MambaSeqParams<Var> {
        let mut m = |shape: &[usize]| g.param(Tensor::randn(shape, 0.5, rng));
        MambaSeqParams {
            theta_kq: m(&[D, D]),
            theta_v: m(&[D, D]),
            conv_k: m(&[4, D]),
            conv_q: m(&[4, D]),
            theta_g: m(&[D, D]),
            out_proj: m(&[D, D]),
            w0: TttState::Linear { w: m(&[D, D]) },
            ln_gain: m(&[D]),
            ln_bias: m(&[D]),
        }
    }

    #[test]
    fn forced_unit_gate_equals_ungated_path() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_mamba(&mut g, &mut rng);
        let x = g.constant(Tensor::randn(&[5, D], 1.0, &mut rng));
        let unit = g.constant(Tensor::full(&[5, D], 1.0));
        let mask = [true; 5];
        let gated = seq_block_mamba_gated(&mut g, x, &p, opts(0.1), &mask, Gate::Forced(unit)).unwrap();

        let shared = g.matmul_nt(x, p.theta_kq).unwrap();
        let keys = g.causal_conv1d(shared, p.conv_k).unwrap();
        let queries = g.causal_conv1d(shared, p.conv_q).unwrap();
        let values = g.matmul_nt(x, p.theta_v).unwrap();
        let scan = ttt_scan(&mut g, keys, values, queries, &p.w0, 0.1, &mask).unwrap();
        let normed = g.layer_norm(scan.outputs, p.ln_gain, p.ln_bias, 1e-5).unwrap();
        let plain = g.matmul_nt(normed, p.out_proj).unwrap();
        assert_eq!(g.value(gated.y), g.value(plain));
    }

    #[test]
    fn delta_kernels_pass_the_shared_projection_through() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(Tensor::randn(&[6, D], 1.0, &mut rng));
        let theta = g.constant(Tensor::randn(&[D, D], 1.0, &mut rng));
        let mut delta = Tensor::zeros(&[4, D]);
        delta.row_mut(3).fill(1.0);
        let delta = g.constant(delta);
        let shared = g.matmul_nt(x, theta).unwrap();
        let keys = g.causal_conv1d(shared, delta).unwrap();
        assert_eq!(g.value(keys), g.value(shared));
    }

    fn zeroed_block(g: &mut Graph, mamba: bool) -> BlockParams<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = |g: &mut Graph, shape: &[usize]| g.param(Tensor::randn(shape, 0.5, &mut rng));
        let seq = if mamba {
            SeqParams::Mamba(MambaSeqParams {
                theta_kq: m(g, &[D, D]),
                theta_v: m(g, &[D, D]),
                conv_k: m(g, &[4, D]),
                conv_q: m(g, &[4, D]),
                theta_g: m(g, &[D, D]),
                out_proj: g.param(Tensor::zeros(&[D, D])),
                w0: TttState::Linear { w: m(g, &[D, D]) },
                ln_gain: m(g, &[D]),
                ln_bias: m(g, &[D]),
            })
        } else {
            SeqParams::Transformer(TransformerSeqParams {
                proj: ViewProjections {
                    theta_k: m(g, &[D, D]),
                    theta_v: m(g, &[D, D]),
                    theta_q: m(g, &[D, D]),
                },
                w0: TttState::Linear { w: m(g, &[D, D]) },
                ln_gain: g.param(Tensor::zeros(&[D])),
                ln_bias: g.param(Tensor::zeros(&[D])),
            })
        };
        BlockParams {
            ln1_gain: m(g, &[D]),
            ln1_bias: m(g, &[D]),
            seq,
            ln2_gain: m(g, &[D]),
            ln2_bias: m(g, &[D]),
            ffn: FfnParams {
                w1: m(g, &[4 * D, D]),
                b1: m(g, &[4 * D]),
                w2: g.param(Tensor::zeros(&[D, 4 * D])),
                b2: g.param(Tensor::zeros(&[D])),
            },
        }
    }

    #[test]
    fn zeroed_branches_make_blocks_identity() {
        for mamba in [false, true] {
            let mut g = Graph::new();
            let p = zeroed_block(&mut g, mamba);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = g.constant(Tensor::randn(&[3, D], 1.0, &mut rng));
            let once = residual_block(&mut g, x, &p, opts(0.1), &[true; 3]).unwrap();
            let twice = residual_block(&mut g, once.out, &p, opts(0.1), &[true; 3]).unwrap();
            assert_eq!(g.value(once.out), g.value(x));
            assert_eq!(g.value(twice.out), g.value(x));
        }
    }

    #[test]
    fn blocks_preserve_shape_for_any_length() {
        for mamba in [false, true] {
            for n in 1..6 {
                let mut g = Graph::new();
                let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
                let p = random_block(&mut g, &mut rng, mamba);
                let x = g.constant(Tensor::randn(&[n, D], 1.0, &mut rng));
                let out = residual_block(&mut g, x, &p, opts(0.1), &vec![true; n]).unwrap();
                assert_eq!(g.shape(out.out), &[n, D]);
            }
        }
    }

    pub(crate) fn random_block(g: &mut Graph, rng: &mut ChaCha8Rng, mamba: bool) -> BlockParams<Var> {
        let mut m = |shape: &[usize]| g.param(Tensor::randn(shape, 0.4, rng));
        let seq = if mamba {
            SeqParams::Mamba(MambaSeqParams {
                theta_kq: m(&[D, D]),
                theta_v: m(&[D, D]),
                conv_k: m(&[4, D]),
                conv_q: m(&[4, D]),
                theta_g: m(&[D, D]),
                out_proj: m(&[D, D]),
                w0: TttState::Mlp {
                    w1: m(&[6, D]),
                    w2: m(&[D, 6]),
                },
                ln_gain: m(&[D]),
                ln_bias: m(&[D]),
            })
        } else {
            SeqParams::Transformer(TransformerSeqParams {
                proj: ViewProjections {
                    theta_k: m(&[D, D]),
                    theta_v: m(&[D, D]),
                    theta_q: m(&[D, D]),
                },
                w0: TttState::Linear { w: m(&[D, D]) },
                ln_gain: m(&[D]),
                ln_bias: m(&[D]),
            })
        };
        BlockParams {
            ln1_gain: m(&[D]),
            ln1_bias: m(&[D]),
            seq,
            ln2_gain: m(&[D]),
            ln2_bias: m(&[D]),
            ffn: FfnParams {
                w1: m(&[4 * D, D]),
                b1: m(&[4 * D]),
                w2: m(&[D, 4 * D]),
                b2: m(&[D]),
            },
        }
    }

    #[test]
    fn block_outputs_are_causal() {
        for mamba in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x0 = Tensor::randn(&[6, D], 1.0, &mut rng);
            let run = |x: &Tensor| {
                let mut g = Graph::new();
                let mut rng = ChaCha8Rng::seed_from_u64(10);
                let p = random_block(&mut g, &mut rng, mamba);
                let xv = g.constant(x.clone());
                let out = residual_block(&mut g, xv, &p, opts(0.1), &[true; 6]).unwrap();
                g.value(out.out).clone()
            };
            let base = run(&x0);
            let mut x1 = x0.clone();
            x1.row_mut(4)[2] += 1.0;
            let bumped = run(&x1);
            assert_eq!(base.data()[..4 * D], bumped.data()[..4 * D]);
            assert_ne!(base.row(4), bumped.row(4));
        }
    }
}
