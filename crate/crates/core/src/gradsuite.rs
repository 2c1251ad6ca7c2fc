//! The finite-difference suite: every differentiable op, the TTT scan, and
//! the full model on a micro configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Backbone, InnerKind, Mode, ModelConfig};
use crate::error::Result;
use crate::gradcheck::{check_many, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::model::{Bound, Model};
use crate::tensor::Tensor;
use crate::ttt::{ttt_scan, TttState};

pub const DEFAULT_TOL: f64 = 1e-4;

/// D=4, |V|=6, one block, no dropout.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        n_items: 6,
        d_model: 4,
        blocks: 1,
        inner_hidden: 6,
        dropout: 0.0,
        max_context: 4,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Window used for the full-model check.
pub const MICRO_ITEMS: [usize; 4] = [3, 1, 6, 2];
const MICRO_TARGETS: [usize; 4] = [0, 5, 1, 3];

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<Case> {
    let sq = |g: &mut Graph, y: Var| g.sum_squares(y);
    vec![
        ("add", vec![vec![3, 2], vec![3, 2]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.add(v[0], v[1])?;
            sq(g, y)
        })),
        ("sub", vec![vec![3, 2], vec![3, 2]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.sub(v[0], v[1])?;
            sq(g, y)
        })),
        ("mul", vec![vec![3, 2], vec![3, 2]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.mul(v[0], v[1])?;
            sq(g, y)
        })),
        ("scale", vec![vec![2, 3]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.scale(v[0], -1.7)?;
            sq(g, y)
        })),
        ("sub_scaled", vec![vec![2, 3], vec![2, 3]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.sub_scaled(v[0], v[1], 0.3)?;
            sq(g, y)
        })),
        ("add_bias", vec![vec![3, 4], vec![4]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.add_bias(v[0], v[1])?;
            sq(g, y)
        })),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.matmul(v[0], v[1])?;
            sq(g, y)
        })),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.matmul_nt(v[0], v[1])?;
            sq(g, y)
        })),
        ("matmul_tn", vec![vec![4, 3], vec![4, 2]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.matmul_tn(v[0], v[1])?;
            sq(g, y)
        })),
        ("gelu", vec![vec![2, 5]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.gelu(v[0])?;
            sq(g, y)
        })),
        ("gelu_prime", vec![vec![2, 5]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.gelu_prime(v[0])?;
            sq(g, y)
        })),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4], vec![3, 4]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = g.mul(y, v[3])?;
            g.sum(w)
        })),
        ("softmax_cross_entropy", vec![vec![3, 5]], Box::new(move |g: &mut Graph, v: &[Var]| {
            g.softmax_cross_entropy(v[0], &[4, 0, 2])
        })),
        ("causal_conv1d", vec![vec![5, 3], vec![4, 3]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.causal_conv1d(v[0], v[1])?;
            sq(g, y)
        })),
        ("rope", vec![vec![4, 6], vec![4, 6]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.rope(v[0], &[0, 1, 2, 7], 1000.0)?;
            let w = g.mul(y, v[1])?;
            g.sum(w)
        })),
        ("gather", vec![vec![5, 3]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.gather(v[0], &[4, 1, 1, 0])?;
            sq(g, y)
        })),
        ("const_mul", vec![vec![2, 3]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.const_mul(v[0], vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0])?;
            sq(g, y)
        })),
        ("mask_rows", vec![vec![3, 2]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.mask_rows(v[0], &[false, true, true])?;
            sq(g, y)
        })),
        ("row_stack", vec![vec![3, 4]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let a = g.row(v[0], 2)?;
            let b = g.row(v[0], 0)?;
            let c = g.row(v[0], 2)?;
            let y = g.stack(&[a, b, c])?;
            let t = g.gelu(y)?;
            sq(g, t)
        })),
        ("sum", vec![vec![2, 3]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.gelu(v[0])?;
            g.sum(y)
        })),
    ]
}

fn scan_case(inner: InnerKind, masked: bool) -> Case {
    let (n, d, h) = (5, 3, 4);
    let name = match (inner, masked) {
        (InnerKind::Linear, false) => "ttt_scan_linear",
        (InnerKind::Linear, true) => "ttt_scan_linear_masked",
        (InnerKind::Mlp, false) => "ttt_scan_mlp",
        (InnerKind::Mlp, true) => "ttt_scan_mlp_masked",
    };
    let mut shapes = vec![vec![n, d], vec![n, d], vec![n, d], vec![n, d]];
    match inner {
        InnerKind::Linear => shapes.push(vec![d, d]),
        InnerKind::Mlp => shapes.extend([vec![h, d], vec![d, h]]),
    }
    let mask: Vec<bool> = (0..n).map(|t| !masked || t >= 2).collect();
    (
        name,
        shapes,
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let state = match inner {
                InnerKind::Linear => TttState::Linear { w: v[4] },
                InnerKind::Mlp => TttState::Mlp { w1: v[4], w2: v[5] },
            };
            let out = ttt_scan(g, v[0], v[1], v[2], &state, 0.1, &mask)?;
            let y = g.mul(out.outputs, v[3])?;
            let s = g.sum(y)?;
            let fin = match out.state {
                TttState::Linear { w } => g.sum_squares(w)?,
                TttState::Mlp { w1, .. } => g.sum_squares(w1)?,
            };
            g.add(s, fin)
        }),
    )
}

/// Next-item cross-entropy of the micro window as a function of all parameters.
pub fn model_loss(model: &Model, g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let bound = Bound {
        params: model.layout().map(&mut |&i| vars[i]),
        vars: vars.to_vec(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward_window(g, &bound, &MICRO_ITEMS, Mode::Train, &mut rng)?;
    let logits = model.logits(g, &bound, fwd.hidden)?;
    g.softmax_cross_entropy(logits, &MICRO_TARGETS)
}

pub fn model_case(micro: &ModelConfig, backbone: Backbone, inner: InnerKind, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = Model::new(ModelConfig {
        backbone,
        inner,
        ..micro.clone()
    })?;
    check_many(
        &format!("model_{backbone}_{inner}"),
        model.tensors(),
        |g, v| model_loss(&model, g, v),
        opts,
    )
}

/// Runs every check; a report is produced for each even when it fails.
pub fn run_suite(micro: &ModelConfig, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = op_cases();
    for inner in [InnerKind::Linear, InnerKind::Mlp] {
        cases.push(scan_case(inner, false));
        cases.push(scan_case(inner, true));
    }
    let mut out = Vec::new();
    for (name, shapes, f) in cases {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let mut t = Tensor::randn(s, 0.8, &mut rng);
                t.data_mut().iter_mut().for_each(|v| *v += 0.01 * rng.random::<f64>());
                t
            })
            .collect();
        out.push(check_many(name, &inputs, |g, v| f(g, v), opts)?);
    }
    for backbone in [Backbone::Transformer, Backbone::Mamba] {
        for inner in [InnerKind::Linear, InnerKind::Mlp] {
            out.push(model_case(micro, backbone, inner, opts)?);
        }
    }
    Ok(out)
}
