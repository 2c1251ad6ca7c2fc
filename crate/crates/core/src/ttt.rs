//! Test-time-training layer.
//!
//! The hidden state is the weight set `W` of a small model `f(·; W)`. Each
//! token projects into a training view `k`, a label view `v` and a query
//! view `q`; the state takes one gradient step on `‖f(k; W) − v‖²` and the
//! token's output is `f(q; W_t)` under the updated state.
//!
//! Updates are written out in closed form with ordinary graph ops, so the
//! outer loss differentiates through every inner step with first-order
//! reverse mode only.

use crate::config::InnerKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Inner-model weights, generic over storage.
#[derive(Clone, Debug, PartialEq)]
pub enum TttState<T> {
    /// `f(k) = W·k`, `W: [D×D]`.
    Linear { w: T },
    /// `f(k) = W2·gelu(W1·k)`, `W1: [H×D]`, `W2: [D×H]`.
    Mlp { w1: T, w2: T },
}

impl<T> TttState<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TttState<U> {
        match self {
            TttState::Linear { w } => TttState::Linear { w: f(w) },
            TttState::Mlp { w1, w2 } => TttState::Mlp {
                w1: f(w1),
                w2: f(w2),
            },
        }
    }

    pub fn kind(&self) -> InnerKind {
        match self {
            TttState::Linear { .. } => InnerKind::Linear,
            TttState::Mlp { .. } => InnerKind::Mlp,
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        match self {
            TttState::Linear { w } => vec![w],
            TttState::Mlp { w1, w2 } => vec![w1, w2],
        }
    }
}

impl TttState<Tensor> {
    /// Inserts the weights as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> TttState<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }
}

impl TttState<Var> {
    pub fn values(&self, g: &Graph) -> TttState<Tensor> {
        self.map(&mut |v| g.value(*v).clone())
    }

    fn is_finite(&self, g: &Graph) -> bool {
        self.tensors().iter().all(|v| g.value(**v).is_finite())
    }
}

/// Projection matrices producing the three views of a token.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewProjections<T> {
    pub theta_k: T,
    pub theta_v: T,
    pub theta_q: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerLoopConfig {
    pub eta: f64,
    pub adapt_at_eval: bool,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        InnerLoopConfig {
            eta: 0.1,
            adapt_at_eval: true,
        }
    }
}

/// `(k, v, q)` for one `[1×D]` token row.
pub fn project_views(
    g: &mut Graph,
    x: Var,
    proj: &ViewProjections<Var>,
) -> Result<(Var, Var, Var)> {
    let k = g.matmul_nt(x, proj.theta_k)?;
    let v = g.matmul_nt(x, proj.theta_v)?;
    let q = g.matmul_nt(x, proj.theta_q)?;
    Ok((k, v, q))
}

/// `f(x; W)` for a `[1×D]` row.
pub fn predict(g: &mut Graph, x: Var, state: &TttState<Var>) -> Result<Var> {
    match state {
        TttState::Linear { w } => g.matmul_nt(x, *w),
        TttState::Mlp { w1, w2 } => {
            let z = g.matmul_nt(x, *w1)?;
            let a = g.gelu(z)?;
            g.matmul_nt(a, *w2)
        }
    }
}

/// `‖f(k; W) − v‖²` as a differentiable scalar.
pub fn inner_loss(g: &mut Graph, k: Var, v: Var, state: &TttState<Var>) -> Result<Var> {
    let pred = predict(g, k, state)?;
    let r = g.sub(pred, v)?;
    g.sum_squares(r)
}

/// One inner gradient step. Returns the new state and the loss at the old one.
pub fn inner_step(
    g: &mut Graph,
    k: Var,
    v: Var,
    state: &TttState<Var>,
    eta: f64,
    token: usize,
) -> Result<(TttState<Var>, f64)> {
    let step = 2.0 * eta;
    let diverged = |e: Error| match e {
        Error::NonFinite { .. } => Error::Divergence { token },
        other => other,
    };
    let (next, loss) = (|| -> Result<_> {
        match state {
            TttState::Linear { w } => {
                let pred = g.matmul_nt(k, *w)?;
                let r = g.sub(pred, v)?;
                let loss = g.value(r).norm_sq();
                let grad = g.matmul_tn(r, k)?;
                let w = g.sub_scaled(*w, grad, step)?;
                Ok((TttState::Linear { w }, loss))
            }
            TttState::Mlp { w1, w2 } => {
                let z = g.matmul_nt(k, *w1)?;
                let a = g.gelu(z)?;
                let pred = g.matmul_nt(a, *w2)?;
                let r = g.sub(pred, v)?;
                let loss = g.value(r).norm_sq();
                // Backpropagate the residual through the old W2 before updating it.
                let back = g.matmul(r, *w2)?;
                let slope = g.gelu_prime(z)?;
                let delta = g.mul(back, slope)?;
                let grad2 = g.matmul_tn(r, a)?;
                let grad1 = g.matmul_tn(delta, k)?;
                let w2 = g.sub_scaled(*w2, grad2, step)?;
                let w1 = g.sub_scaled(*w1, grad1, step)?;
                Ok((TttState::Mlp { w1, w2 }, loss))
            }
        }
    })()
    .map_err(diverged)?;
    if !loss.is_finite() || !next.is_finite(g) {
        return Err(Error::Divergence { token });
    }
    Ok((next, loss))
}

#[derive(Debug)]
pub struct ScanOutput {
    /// `[n×D]`; rows at masked positions are zero.
    pub outputs: Var,
    pub state: TttState<Var>,
    /// Inner loss before each position's update; `None` where masked.
    pub losses: Vec<Option<f64>>,
}

/// Runs the inner loop over a window. Position `t` updates the state with
/// `(K[t], V[t])` and then reads `f(Q[t]; W_t)`. Masked positions leave the
/// state untouched and output zeros. With `eta == 0` the state never moves
/// and the scan is the static map `f(·; W_0)`.
pub fn ttt_scan(
    g: &mut Graph,
    keys: Var,
    values: Var,
    queries: Var,
    state0: &TttState<Var>,
    eta: f64,
    mask: &[bool],
) -> Result<ScanOutput> {
    let shape = g.shape(keys).to_vec();
    for other in [values, queries] {
        if g.shape(other) != shape.as_slice() {
            return Err(Error::Shape {
                op: "ttt_scan",
                lhs: shape,
                rhs: g.shape(other).to_vec(),
            });
        }
    }
    let (n, d) = (shape[0], shape[1]);
    if mask.len() != n {
        return Err(Error::Shape {
            op: "ttt_scan",
            lhs: shape,
            rhs: vec![mask.len()],
        });
    }
    let mut state = state0.clone();
    let mut rows = Vec::with_capacity(n);
    let mut losses = Vec::with_capacity(n);
    let mut zero = None;
    for (t, &valid) in mask.iter().enumerate() {
        if !valid {
            let z = *zero.get_or_insert_with(|| g.constant(Tensor::zeros(&[1, d])));
            rows.push(z);
            losses.push(None);
            continue;
        }
        let k = g.row(keys, t)?;
        let v = g.row(values, t)?;
        let q = g.row(queries, t)?;
        if eta > 0.0 {
            let (next, loss) = inner_step(g, k, v, &state, eta, t)?;
            state = next;
            losses.push(Some(loss));
        } else {
            let l = inner_loss(g, k, v, &state)?;
            losses.push(Some(g.value(l).item()));
        }
        rows.push(predict(g, q, &state)?);
    }
    let outputs = g.stack(&rows)?;
    Ok(ScanOutput {
        outputs,
        state,
        losses,
    })
}
