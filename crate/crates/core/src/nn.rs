//! Small trainable building blocks composed from graph primitives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::rng::RngState;
use crate::tensor::EPS_NUM;

/// Affine map x[m,in] -> x @ w + b, w: [in,out], b: [out].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut RngState,
    ) -> Self {
        let w = store.add_uniform(format!("{prefix}.w"), &[in_dim, out_dim], in_dim, gain, rng);
        let b = store.add_zeros(format!("{prefix}.b"), &[out_dim]);
        LinearParams { w, b }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w);
        g.add_row_vec(xw, b)
    }
}

/// Per-row layer normalization with learnable gain and bias.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gain = store.add(format!("{prefix}.gain"), crate::tensor::Tensor::ones(&[dim]));
        let bias = store.add_zeros(format!("{prefix}.bias"), &[dim]);
        LayerNormParams { gain, bias }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        layer_norm(g, x, gain, bias)
    }
}

/// Normalizes each row of x to zero mean and unit variance, then applies
/// gain and bias along the feature axis.
pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Var {
    let d = g.value(x).cols() as f64;
    let sums = g.sum_axis(x, 1);
    let neg_mean = g.scale(sums, -1.0 / d);
    let centered = g.add_col_vec(x, neg_mean);
    let sq = g.mul(centered, centered);
    let var_sums = g.sum_axis(sq, 1);
    let var = g.scale(var_sums, 1.0 / d);
    let shifted = g.add_scalar(var, EPS_NUM);
    let std = g.sqrt(shifted);
    let inv = g.recip(std);
    let normed = g.mul_col_vec(centered, inv);
    let scaled = g.mul_row_vec(normed, gain);
    g.add_row_vec(scaled, bias)
}

/// Gated recurrent cell over row-batched states; input and state share dim D.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GruParams {
    pub update_x: ParamId,
    pub update_h: ParamId,
    pub update_b: ParamId,
    pub reset_x: ParamId,
    pub reset_h: ParamId,
    pub reset_b: ParamId,
    pub cand_x: ParamId,
    pub cand_h: ParamId,
    pub cand_b: ParamId,
}

impl GruParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut RngState) -> Self {
        let mut mat = |name: &str, rng: &mut RngState| {
            store.add_uniform(format!("{prefix}.{name}"), &[dim, dim], dim, 1.0, rng)
        };
        let update_x = mat("update_x", rng);
        let update_h = mat("update_h", rng);
        let reset_x = mat("reset_x", rng);
        let reset_h = mat("reset_h", rng);
        let cand_x = mat("cand_x", rng);
        let cand_h = mat("cand_h", rng);
        let update_b = store.add_zeros(format!("{prefix}.update_b"), &[dim]);
        let reset_b = store.add_zeros(format!("{prefix}.reset_b"), &[dim]);
        let cand_b = store.add_zeros(format!("{prefix}.cand_b"), &[dim]);
        GruParams {
            update_x,
            update_h,
            update_b,
            reset_x,
            reset_h,
            reset_b,
            cand_x,
            cand_h,
            cand_b,
        }
    }

    /// h' = z * h + (1 - z) * tanh(Wx x + Wh (r * h) + b)
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, input: Var, state: Var) -> Var {
        let gate = |g: &mut Graph, wx, wh, b, x: Var, h: Var| {
            let wx = g.param(store, wx);
            let wh = g.param(store, wh);
            let b = g.param(store, b);
            let xs = g.matmul(x, wx);
            let hs = g.matmul(h, wh);
            let s = g.add(xs, hs);
            g.add_row_vec(s, b)
        };
        let z_pre = gate(g, self.update_x, self.update_h, self.update_b, input, state);
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, self.reset_x, self.reset_h, self.reset_b, input, state);
        let r = g.sigmoid(r_pre);
        let gated_state = g.mul(r, state);
        let cand_pre = gate(g, self.cand_x, self.cand_h, self.cand_b, input, gated_state);
        let cand = g.tanh(cand_pre);
        let keep = g.mul(z, state);
        let one_minus_z = {
            let neg = g.scale(z, -1.0);
            g.add_scalar(neg, 1.0)
        };
        let take = g.mul(one_minus_z, cand);
        g.add(keep, take)
    }
}
