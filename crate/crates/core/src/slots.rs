//! Two-stage slot attention over a bank of learnable Gaussian slots.
//!
//! Stage one initializes slots from the bank means and competes over the
//! fused features to produce semantic masks and centers. Stage two samples
//! slot initializations per semantic from the corresponding Gaussian and
//! aggregates features only inside the binarized semantic mask, separating
//! instances within each semantic. Both stages share the same projection
//! heads and recurrent update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::config::SlotConfig;
use crate::nn::{GruParams, LayerNormParams, LinearParams};
use crate::rng::RngState;
use crate::tensor::{Tensor, EPS_NUM};

/// N Gaussian slots: means and raw (pre-softplus) deviations, both [N, D].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SlotBankParams {
    pub means: ParamId,
    pub raw_dev: ParamId,
}

/// softplus(RHO_INIT) = 0.5, the initial per-coordinate deviation.
const RHO_INIT: f64 = -0.432752069756741;

/// Glorot-uniform bound relative to 1/sqrt(fan_in), for square maps.
const GLOROT_GAIN: f64 = 1.7320508075688772;

impl SlotBankParams {
    pub fn init(store: &mut ParamStore, n: usize, dim: usize, rng: &mut RngState) -> Self {
        let means = store.add_uniform("bank.means", &[n, dim], dim, GLOROT_GAIN, rng);
        let raw_dev = store.add("bank.raw_dev", Tensor::full(&[n, dim], RHO_INIT));
        SlotBankParams { means, raw_dev }
    }
}

/// Q/K/V projections with the stage-shared layer norms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttentionParams {
    pub input_norm: LayerNormParams,
    pub slot_norm: LayerNormParams,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, dim: usize, rng: &mut RngState) -> Self {
        AttentionParams {
            input_norm: LayerNormParams::init(store, "attn.input_norm", dim),
            slot_norm: LayerNormParams::init(store, "attn.slot_norm", dim),
            query: LinearParams::init(store, "attn.query", dim, dim, GLOROT_GAIN, rng),
            key: LinearParams::init(store, "attn.key", dim, dim, GLOROT_GAIN, rng),
            value: LinearParams::init(store, "attn.value", dim, dim, GLOROT_GAIN, rng),
        }
    }
}

/// Keys and values projected once per frame and shared by both stages.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs {
    pub keys: Var,
    pub values: Var,
}

pub fn prepare_inputs(
    g: &mut Graph,
    store: &ParamStore,
    attn: &AttentionParams,
    cfg: &SlotConfig,
    fused: Var,
) -> AttentionInputs {
    let normed = if cfg.layer_norm { attn.input_norm.apply(g, store, fused) } else { fused };
    AttentionInputs {
        keys: attn.key.apply(g, store, normed),
        values: attn.value.apply(g, store, normed),
    }
}

/// Slot update rule; tests may swap the recurrent cell for a pass-through.
#[derive(Clone, Copy)]
pub enum SlotUpdate<'a> {
    Gru(&'a GruParams),
    PassThrough,
}

impl SlotUpdate<'_> {
    fn apply(&self, g: &mut Graph, store: &ParamStore, updates: Var, state: Var) -> Var {
        match self {
            SlotUpdate::Gru(p) => p.apply(g, store, updates, state),
            SlotUpdate::PassThrough => updates,
        }
    }
}

/// Stage-one result: masks [N, HW] (query-axis softmax of the final
/// iteration) and centers [N, D] (final slot vectors).
#[derive(Debug, Clone, Copy)]
pub struct SemanticVars {
    pub masks: Var,
    pub centers: Var,
}

/// Stage-two result for one semantic.
#[derive(Debug, Clone)]
pub struct InstanceSemantic {
    /// Final slot vectors [P, D].
    pub slots: Var,
    /// Exported instance attention [P, HW]: the final query-axis softmax
    /// restricted to the binarized semantic mask (exact zeros outside).
    pub attention: Var,
    /// Final masked weighted-mean coefficients [P, HW].
    pub agg_weights: Var,
    /// Retained Gaussian draws used as slot initialization.
    pub init_noise: Tensor,
    /// The binarized semantic mask row driving the aggregation.
    pub binary_mask: Vec<f64>,
}

/// Reparameterized draw of `count` slots from Gaussian `semantic`:
/// mu + softplus(rho) * eps. Gradients reach the bank through the samples.
pub fn sample_slots(
    g: &mut Graph,
    store: &ParamStore,
    bank: &SlotBankParams,
    semantic: usize,
    count: usize,
    rng: &mut RngState,
) -> (Var, Tensor) {
    let dim = store.value(bank.means).cols();
    let eps = Tensor::from_fn(&[count, dim], |_| rng.normal());
    let means = g.param(store, bank.means);
    let raw = g.param(store, bank.raw_dev);
    let mu_n = g.row(means, semantic);
    let rho_n = g.row(raw, semantic);
    let sigma_n = g.softplus(rho_n);
    let mu_rep = g.repeat_row(mu_n, count);
    let sigma_rep = g.repeat_row(sigma_n, count);
    let noise = g.input(eps.clone());
    let scaled = g.mul(sigma_rep, noise);
    (g.add(mu_rep, scaled), eps)
}

/// One attention iteration shared by both stages: query-axis softmax of the
/// scaled logits, then a weighted mean with an optional spatial mask.
fn attention_step(
    g: &mut Graph,
    store: &ParamStore,
    attn: &AttentionParams,
    cfg: &SlotConfig,
    inputs: &AttentionInputs,
    slots: Var,
    spatial_mask: Option<Var>,
) -> (Var, Var, Var) {
    let dim = g.value(slots).cols();
    let normed = if cfg.layer_norm { attn.slot_norm.apply(g, store, slots) } else { slots };
    let q = attn.query.apply(g, store, normed);
    let logits = g.matmul_nt(q, inputs.keys);
    let scaled = g.scale(logits, 1.0 / (dim as f64).sqrt());
    let masks = g.softmax_axis(scaled, 0);
    let weighted = match spatial_mask {
        Some(m) => g.mul_row_vec(masks, m),
        None => masks,
    };
    let row_mass = g.sum_axis(weighted, 1);
    let denom = g.add_scalar(row_mass, EPS_NUM);
    let inv = g.recip(denom);
    let agg = g.mul_col_vec(weighted, inv);
    let updates = g.matmul(agg, inputs.values);
    (masks, agg, updates)
}

/// Stage-one iteration loop with a caller-chosen initialization and update.
pub fn stage_one_with(
    g: &mut Graph,
    store: &ParamStore,
    attn: &AttentionParams,
    cfg: &SlotConfig,
    inputs: &AttentionInputs,
    init_slots: Var,
    update: SlotUpdate,
) -> SemanticVars {
    let mut slots = init_slots;
    let mut masks = None;
    for _ in 0..cfg.iters {
        let (m, _, updates) = attention_step(g, store, attn, cfg, inputs, slots, None);
        slots = update.apply(g, store, updates, slots);
        masks = Some(m);
    }
    SemanticVars { masks: masks.expect("iters >= 1"), centers: slots }
}

/// Semantic decomposition: slots initialized from the bank means (no
/// randomness), or sampled per slot when `cfg.random_init` is set.
pub fn semantic_decompose(
    g: &mut Graph,
    store: &ParamStore,
    bank: &SlotBankParams,
    attn: &AttentionParams,
    gru: &GruParams,
    cfg: &SlotConfig,
    inputs: &AttentionInputs,
    rng: &mut RngState,
) -> SemanticVars {
    let init = if cfg.random_init {
        // Draw every slot from its bank Gaussian (slot i from row i mod rows;
        // a single-row bank reproduces the classic shared-Gaussian variant).
        let rows = store.value(bank.means).rows();
        let mut assembled: Option<Var> = None;
        for i in 0..cfg.n {
            let (s, _) = sample_slots(g, store, bank, i % rows, 1, rng);
            assembled = Some(match assembled {
                None => s,
                Some(acc) => concat_rows(g, acc, s),
            });
        }
        assembled.expect("n >= 1")
    } else {
        g.param(store, bank.means)
    };
    stage_one_with(g, store, attn, cfg, inputs, init, SlotUpdate::Gru(gru))
}

/// Stacks b's rows below a's rows via constant selector matrices, so
/// gradients route back to both inputs.
fn concat_rows(g: &mut Graph, a: Var, b: Var) -> Var {
    let (ra, rb) = (g.value(a).rows(), g.value(b).rows());
    let sel_top = Tensor::from_fn(&[ra + rb, ra], |i| {
        let (r, c) = (i / ra, i % ra);
        if r == c { 1.0 } else { 0.0 }
    });
    let sel_bottom = Tensor::from_fn(&[ra + rb, rb], |i| {
        let (r, c) = (i / rb, i % rb);
        if r >= ra && r - ra == c { 1.0 } else { 0.0 }
    });
    let st = g.input(sel_top);
    let sb = g.input(sel_bottom);
    let top = g.matmul(st, a);
    let bottom = g.matmul(sb, b);
    g.add(top, bottom)
}

/// Binarized mask: 1 where the value strictly exceeds tau.
pub fn binarize(masks: &Tensor, tau: f64) -> Tensor {
    masks.map(|v| if v > tau { 1.0 } else { 0.0 })
}

/// Stage-two loop with a caller-chosen update rule, for one semantic.
#[allow(clippy::too_many_arguments)]
pub fn instance_stage_with(
    g: &mut Graph,
    store: &ParamStore,
    attn: &AttentionParams,
    cfg: &SlotConfig,
    inputs: &AttentionInputs,
    init_slots: Var,
    binary_mask_row: &[f64],
    update: SlotUpdate,
) -> (Var, Var, Var) {
    let mask = g.input(Tensor::new(vec![binary_mask_row.len()], binary_mask_row.to_vec()).unwrap());
    let mut slots = init_slots;
    let mut exported = None;
    for _ in 0..cfg.iters {
        let (m, agg, updates) = attention_step(g, store, attn, cfg, inputs, slots, Some(mask));
        slots = update.apply(g, store, updates, slots);
        let masked_attention = g.mul_row_vec(m, mask);
        exported = Some((masked_attention, agg));
    }
    let (attention, agg) = exported.expect("iters >= 1");
    (slots, attention, agg)
}

/// Masked instance identification across all semantics, computed as one
/// stacked [N*P, ...] pass: the grouped softmax keeps each semantic's P slots
/// competing only among themselves, which makes this bit-identical to
/// processing semantics one at a time. Each semantic draws its slot
/// initializations from its own RNG substream, so results do not depend on
/// evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn instance_identify(
    g: &mut Graph,
    store: &ParamStore,
    bank: &SlotBankParams,
    attn: &AttentionParams,
    gru: &GruParams,
    cfg: &SlotConfig,
    inputs: &AttentionInputs,
    semantic_masks: &Tensor,
    rng: &RngState,
) -> Vec<InstanceSemantic> {
    let binarized = binarize(semantic_masks, cfg.tau);
    let n = semantic_masks.rows();
    let p = cfg.p;
    let hw = semantic_masks.cols();
    let bank_rows = store.value(bank.means).rows();
    let dim = store.value(bank.means).cols();

    // Stacked reparameterized initialization: row n*p + i draws from the
    // Gaussian of semantic n (same substream layout as per-semantic mode).
    let selector = Tensor::from_fn(&[n * p, bank_rows], |idx| {
        let (row, col) = (idx / bank_rows, idx % bank_rows);
        if (row / p) % bank_rows == col {
            1.0
        } else {
            0.0
        }
    });
    let mut noise = Vec::with_capacity(n * p * dim);
    for semantic in 0..n {
        let mut sub = rng.substream(semantic as u64);
        for _ in 0..p * dim {
            noise.push(sub.normal());
        }
    }
    let noise = Tensor::new(vec![n * p, dim], noise).expect("noise shape");
    let sel = g.input(selector);
    let means = g.param(store, bank.means);
    let raw = g.param(store, bank.raw_dev);
    let sigma = g.softplus(raw);
    let mu_stack = g.matmul(sel, means);
    let sigma_stack = g.matmul(sel, sigma);
    let noise_var = g.input(noise.clone());
    let perturb = g.mul(sigma_stack, noise_var);
    let mut slots = g.add(mu_stack, perturb);

    // Binarized mask rows, each repeated P times.
    let mask_stack = Tensor::from_fn(&[n * p, hw], |idx| {
        let (row, col) = (idx / hw, idx % hw);
        binarized.at2(row / p, col)
    });
    let mask = g.input(mask_stack);

    let scale = 1.0 / (dim as f64).sqrt();
    let mut exported = None;
    for _ in 0..cfg.iters {
        let normed = if cfg.layer_norm { attn.slot_norm.apply(g, store, slots) } else { slots };
        let q = attn.query.apply(g, store, normed);
        let logits = g.matmul_nt(q, inputs.keys);
        let scaled = g.scale(logits, scale);
        let m = g.softmax_col_groups(scaled, p);
        let weighted = g.mul(m, mask);
        let row_mass = g.sum_axis(weighted, 1);
        let denom = g.add_scalar(row_mass, EPS_NUM);
        let inv = g.recip(denom);
        let agg = g.mul_col_vec(weighted, inv);
        let updates = g.matmul(agg, inputs.values);
        slots = gru.apply(g, store, updates, slots);
        exported = Some((weighted, agg));
    }
    let (attention, agg) = exported.expect("iters >= 1");

    (0..n)
        .map(|semantic| InstanceSemantic {
            slots: g.slice_rows(slots, semantic * p, p),
            attention: g.slice_rows(attention, semantic * p, p),
            agg_weights: g.slice_rows(agg, semantic * p, p),
            init_noise: Tensor::new(
                vec![p, dim],
                noise.data()[semantic * p * dim..(semantic + 1) * p * dim].to_vec(),
            )
            .expect("noise slice"),
            binary_mask: binarized.row_slice(semantic).to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const HW: usize = 4;
    const D: usize = 3;

    fn identity_attention(store: &mut ParamStore) -> AttentionParams {
        let mut rng = RngState::new(0);
        let attn = AttentionParams::init(store, D, &mut rng);
        let eye = Tensor::from_fn(&[D, D], |i| if i / D == i % D { 1.0 } else { 0.0 });
        store.set_value(attn.query.w, eye.clone());
        store.set_value(attn.key.w, eye.clone());
        store.set_value(attn.value.w, eye);
        attn
    }

    fn no_norm_cfg(n: usize, iters: usize) -> SlotConfig {
        SlotConfig { n, p: 2, iters, tau: 0.5, layer_norm: false, random_init: false, instance_stage: true }
    }

    /// Scalar oracle of one unmasked iteration with identity heads:
    /// M = softmax(S F^T / sqrt(D), slot axis), A = row-normalized M,
    /// S' = A F.
    fn one_iteration_oracle(slots: &Tensor, feats: &Tensor, mask: Option<&[f64]>) -> (Tensor, Tensor) {
        let n = slots.rows();
        let hw = feats.rows();
        let mut logits = vec![0.0; n * hw];
        for s in 0..n {
            for i in 0..hw {
                let mut acc = 0.0;
                for d in 0..D {
                    acc += slots.at2(s, d) * feats.at2(i, d);
                }
                logits[s * hw + i] = acc / (D as f64).sqrt();
            }
        }
        // softmax over slots per location
        let mut m = vec![0.0; n * hw];
        for i in 0..hw {
            let mx = (0..n).map(|s| logits[s * hw + i]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|s| (logits[s * hw + i] - mx).exp()).sum();
            for s in 0..n {
                m[s * hw + i] = (logits[s * hw + i] - mx).exp() / z;
            }
        }
        let mut weighted = m.clone();
        if let Some(mask) = mask {
            for s in 0..n {
                for i in 0..hw {
                    weighted[s * hw + i] *= mask[i];
                }
            }
        }
        let mut updates = vec![0.0; n * D];
        for s in 0..n {
            let mass: f64 = weighted[s * hw..(s + 1) * hw].iter().sum();
            for d in 0..D {
                let mut acc = 0.0;
                for i in 0..hw {
                    acc += weighted[s * hw + i] / (mass + EPS_NUM) * feats.at2(i, d);
                }
                updates[s * D + d] = acc;
            }
        }
        (
            Tensor::new(vec![n, hw], m).unwrap(),
            Tensor::new(vec![n, D], updates).unwrap(),
        )
    }

    #[test]
    fn single_slot_mask_is_all_ones() {
        let mut store = ParamStore::new();
        let attn = identity_attention(&mut store);
        let cfg = no_norm_cfg(1, 1);
        let mut rng = RngState::new(1);
        let feats = Tensor::from_fn(&[HW, D], |_| rng.uniform_in(-1.0, 1.0));
        let init = store.add("init", Tensor::from_fn(&[1, D], |_| rng.uniform()));
        let mut g = Graph::no_grad();
        let fv = g.input(feats);
        let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
        let iv = g.param(&store, init);
        let out = stage_one_with(&mut g, &store, &attn, &cfg, &inputs, iv, SlotUpdate::PassThrough);
        for &v in g.value(out.masks).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_iteration_matches_scalar_oracle() {
        let mut store = ParamStore::new();
        let attn = identity_attention(&mut store);
        let cfg = no_norm_cfg(2, 1);
        let slots0 = Tensor::from_rows(&[vec![0.5, -0.2, 0.8], vec![-0.4, 0.9, 0.1]]).unwrap();
        let feats = Tensor::from_rows(&[
            vec![0.2, 0.1, -0.5],
            vec![0.9, -0.3, 0.4],
            vec![-0.6, 0.7, 0.2],
            vec![0.3, 0.3, 0.3],
        ])
        .unwrap();
        let init = store.add("init", slots0.clone());
        let mut g = Graph::no_grad();
        let fv = g.input(feats.clone());
        let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
        let iv = g.param(&store, init);
        let out = stage_one_with(&mut g, &store, &attn, &cfg, &inputs, iv, SlotUpdate::PassThrough);
        let (want_m, want_s) = one_iteration_oracle(&slots0, &feats, None);
        for (a, b) in g.value(out.masks).data().iter().zip(want_m.data().iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
        for (a, b) in g.value(out.centers).data().iter().zip(want_s.data().iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn stage_one_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(9);
        let attn = AttentionParams::init(&mut store, D, &mut rng);
        let gru = GruParams::init(&mut store, "gru", D, &mut rng);
        let bank = SlotBankParams::init(&mut store, 3, D, &mut rng);
        let cfg = SlotConfig { n: 3, iters: 3, ..no_norm_cfg(3, 3) };
        let feats = Tensor::from_fn(&[HW, D], |_| rng.uniform_in(-1.0, 1.0));
        let run = || {
            let mut g = Graph::no_grad();
            let fv = g.input(feats.clone());
            let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
            let mut r = RngState::new(0);
            let out =
                semantic_decompose(&mut g, &store, &bank, &attn, &gru, &cfg, &inputs, &mut r);
            (g.value(out.masks).clone(), g.value(out.centers).clone())
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(m1, m2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn mask_columns_sum_to_one_every_iteration() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(11);
        let attn = AttentionParams::init(&mut store, D, &mut rng);
        let gru = GruParams::init(&mut store, "gru", D, &mut rng);
        let bank = SlotBankParams::init(&mut store, 5, D, &mut rng);
        for iters in 1..=3 {
            let cfg = SlotConfig { n: 5, iters, layer_norm: true, ..no_norm_cfg(5, iters) };
            let feats = Tensor::from_fn(&[HW, D], |_| rng.uniform_in(-2.0, 2.0));
            let mut g = Graph::no_grad();
            let fv = g.input(feats);
            let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
            let mut r = RngState::new(0);
            let out =
                semantic_decompose(&mut g, &store, &bank, &attn, &gru, &cfg, &inputs, &mut r);
            let sums = g.value(out.masks).sum_axis(0).unwrap();
            for &s in sums.data() {
                assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn binarize_basic_and_disjoint() {
        let m = Tensor::from_rows(&[vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap();
        let b = binarize(&m, 0.5);
        assert_eq!(b.data(), &[1.0, 0.0, 0.0, 1.0]);

        // Column-normalized masks binarized at 0.5 leave at most one claim
        // per location.
        let mut rng = RngState::new(3);
        let logits = Tensor::from_fn(&[6, 10], |_| rng.uniform_in(-3.0, 3.0));
        let masks = logits.softmax_axis(0).unwrap();
        let b = binarize(&masks, 0.5);
        let col_counts = b.sum_axis(0).unwrap();
        for &c in col_counts.data() {
            assert!(c <= 1.0);
        }

        // Uniform masks over many slots binarize to nothing.
        let uniform = Tensor::full(&[16, 8], 1.0 / 16.0);
        assert_eq!(binarize(&uniform, 0.5).max_abs(), 0.0);
    }

    #[test]
    fn sampled_slots_match_gaussian_moments() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(13);
        let bank = SlotBankParams::init(&mut store, 2, D, &mut rng);
        let mu = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap();
        store.set_value(bank.means, mu.clone());
        // sigma = softplus(rho) = 0.5 from init
        let total = 10_000;
        let mut sums = vec![0.0; D];
        let mut sq = vec![0.0; D];
        let mut draw_rng = RngState::new(77);
        let mut g = Graph::no_grad();
        let (slots, _) = sample_slots(&mut g, &store, &bank, 0, total, &mut draw_rng);
        let t = g.value(slots);
        for p in 0..total {
            for d in 0..D {
                let v = t.at2(p, d);
                sums[d] += v;
                sq[d] += v * v;
            }
        }
        let sigma = 0.5;
        for d in 0..D {
            let mean = sums[d] / total as f64;
            let var = sq[d] / total as f64 - mean * mean;
            assert!(
                (mean - mu.at2(0, d)).abs() <= 4.0 * sigma / 100.0,
                "mean off at {d}: {mean}"
            );
            assert!((var - sigma * sigma).abs() <= 0.1 * sigma * sigma, "var off at {d}: {var}");
        }
    }

    #[test]
    fn zero_deviation_collapses_samples_to_mean() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(15);
        let bank = SlotBankParams::init(&mut store, 1, D, &mut rng);
        store.set_value(bank.raw_dev, Tensor::full(&[1, D], -60.0)); // softplus -> ~0
        let mut g = Graph::no_grad();
        let mut r = RngState::new(5);
        let (slots, _) = sample_slots(&mut g, &store, &bank, 0, 4, &mut r);
        let mu = store.value(bank.means).row(0).unwrap();
        for p in 0..4 {
            for d in 0..D {
                assert!((g.value(slots).at2(p, d) - mu.data()[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(16);
        let bank = SlotBankParams::init(&mut store, 1, D, &mut rng);
        let draw = |seed| {
            let mut g = Graph::no_grad();
            let mut r = RngState::new(seed);
            let (slots, _) = sample_slots(&mut g, &store, &bank, 0, 3, &mut r);
            g.value(slots).clone()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn all_ones_mask_reduces_to_stage_one_rule() {
        let mut store = ParamStore::new();
        let attn = identity_attention(&mut store);
        let cfg = no_norm_cfg(2, 1);
        let mut rng = RngState::new(17);
        let feats = Tensor::from_fn(&[HW, D], |_| rng.uniform_in(-1.0, 1.0));
        let init = store.add("init", Tensor::from_fn(&[2, D], |_| rng.uniform_in(-1.0, 1.0)));
        let mut g = Graph::no_grad();
        let fv = g.input(feats);
        let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
        let iv = g.param(&store, init);
        let unmasked =
            stage_one_with(&mut g, &store, &attn, &cfg, &inputs, iv, SlotUpdate::PassThrough);
        let (slots, _attention, _) = instance_stage_with(
            &mut g,
            &store,
            &attn,
            &cfg,
            &inputs,
            iv,
            &[1.0; HW],
            SlotUpdate::PassThrough,
        );
        assert_eq!(g.value(unmasked.centers), g.value(slots));
    }

    #[test]
    fn all_zero_mask_annihilates_aggregation() {
        let mut store = ParamStore::new();
        let attn = identity_attention(&mut store);
        let cfg = no_norm_cfg(2, 1);
        let mut rng = RngState::new(18);
        let feats = Tensor::from_fn(&[HW, D], |_| rng.uniform_in(-1.0, 1.0));
        let init = store.add("init", Tensor::from_fn(&[2, D], |_| rng.uniform_in(-1.0, 1.0)));
        let mut g = Graph::no_grad();
        let fv = g.input(feats);
        let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
        let iv = g.param(&store, init);
        let (_, attention, agg) = instance_stage_with(
            &mut g,
            &store,
            &attn,
            &cfg,
            &inputs,
            iv,
            &[0.0; HW],
            SlotUpdate::PassThrough,
        );
        assert!(g.value(agg).max_abs() < 1e-6);
        assert_eq!(g.value(attention).max_abs(), 0.0);
    }

    #[test]
    fn masked_iteration_matches_scalar_oracle() {
        let mut store = ParamStore::new();
        let attn = identity_attention(&mut store);
        let cfg = no_norm_cfg(2, 1);
        let slots0 = Tensor::from_rows(&[vec![0.4, 0.2, -0.1], vec![-0.3, 0.6, 0.5]]).unwrap();
        let feats = Tensor::from_rows(&[
            vec![0.1, -0.2, 0.3],
            vec![0.7, 0.5, -0.4],
            vec![-0.8, 0.1, 0.6],
            vec![0.2, 0.9, 0.0],
        ])
        .unwrap();
        let mask = [1.0, 0.0, 1.0, 0.0];
        let init = store.add("init", slots0.clone());
        let mut g = Graph::no_grad();
        let fv = g.input(feats.clone());
        let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
        let iv = g.param(&store, init);
        let (slots, attention, _) = instance_stage_with(
            &mut g,
            &store,
            &attn,
            &cfg,
            &inputs,
            iv,
            &mask,
            SlotUpdate::PassThrough,
        );
        let (want_m, want_s) = one_iteration_oracle(&slots0, &feats, Some(&mask));
        for (a, b) in g.value(slots).data().iter().zip(want_s.data().iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
        // Exported attention is the softmax restricted to the mask.
        for s in 0..2 {
            for i in 0..HW {
                let want = want_m.at2(s, i) * mask[i];
                assert!((g.value(attention).at2(s, i) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn stage_two_places_no_mass_outside_mask() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(19);
        let attn = AttentionParams::init(&mut store, D, &mut rng);
        let gru = GruParams::init(&mut store, "gru", D, &mut rng);
        let bank = SlotBankParams::init(&mut store, 3, D, &mut rng);
        let cfg = SlotConfig { n: 3, p: 2, iters: 3, tau: 0.5, layer_norm: true, random_init: false, instance_stage: true };
        let feats = Tensor::from_fn(&[8, D], |_| rng.uniform_in(-1.0, 1.0));
        let sem_logits = Tensor::from_fn(&[3, 8], |_| rng.uniform_in(-4.0, 4.0));
        let sem = sem_logits.softmax_axis(0).unwrap();
        let mut g = Graph::no_grad();
        let fv = g.input(feats);
        let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
        let base = RngState::new(23);
        let outs = instance_identify(
            &mut g, &store, &bank, &attn, &gru, &cfg, &inputs, &sem, &base,
        );
        let binarized = binarize(&sem, cfg.tau);
        for (n, inst) in outs.iter().enumerate() {
            for p in 0..cfg.p {
                for i in 0..8 {
                    if binarized.at2(n, i) == 0.0 {
                        assert!(g.value(inst.attention).at2(p, i).abs() <= 1e-12);
                        assert!(g.value(inst.agg_weights).at2(p, i).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn stacked_instance_pass_matches_per_semantic_loop_bitwise() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(31);
        let attn = AttentionParams::init(&mut store, D, &mut rng);
        let gru = GruParams::init(&mut store, "gru", D, &mut rng);
        let bank = SlotBankParams::init(&mut store, 3, D, &mut rng);
        let cfg = SlotConfig {
            n: 3,
            p: 2,
            iters: 3,
            tau: 0.2,
            layer_norm: true,
            random_init: false,
            instance_stage: true,
        };
        let feats = Tensor::from_fn(&[8, D], |_| rng.uniform_in(-1.0, 1.0));
        let sem = Tensor::from_fn(&[3, 8], |_| rng.uniform_in(-3.0, 3.0))
            .softmax_axis(0)
            .unwrap();
        let base = RngState::new(91);

        let mut g = Graph::no_grad();
        let fv = g.input(feats);
        let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
        let stacked = instance_identify(
            &mut g, &store, &bank, &attn, &gru, &cfg, &inputs, &sem, &base,
        );
        let binarized = binarize(&sem, cfg.tau);
        for (n, inst) in stacked.iter().enumerate() {
            let mut sub = base.substream(n as u64);
            let (init, _) = sample_slots(&mut g, &store, &bank, n, cfg.p, &mut sub);
            let (slots, attention, agg) = instance_stage_with(
                &mut g,
                &store,
                &attn,
                &cfg,
                &inputs,
                init,
                binarized.row_slice(n),
                SlotUpdate::Gru(&gru),
            );
            assert_eq!(g.value(inst.slots), g.value(slots), "slots differ at semantic {n}");
            assert_eq!(g.value(inst.attention), g.value(attention));
            assert_eq!(g.value(inst.agg_weights), g.value(agg));
        }
    }

    #[test]
    fn instance_results_use_per_semantic_substreams() {
        // The draw for semantic k must not depend on how many semantics were
        // processed before it.
        let mut store = ParamStore::new();
        let mut rng = RngState::new(25);
        let bank = SlotBankParams::init(&mut store, 4, D, &mut rng);
        let base = RngState::new(55);
        let mut g = Graph::no_grad();
        let mut direct = base.substream(2);
        let (s_direct, _) = sample_slots(&mut g, &store, &bank, 2, 3, &mut direct);
        let mut other_first = base.substream(1);
        let _ = sample_slots(&mut g, &store, &bank, 1, 3, &mut other_first);
        let mut again = base.substream(2);
        let (s_again, _) = sample_slots(&mut g, &store, &bank, 2, 3, &mut again);
        assert_eq!(g.value(s_direct), g.value(s_again));
    }

    #[test]
    fn random_init_stage_one_stacks_sampled_slots() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(27);
        let attn = AttentionParams::init(&mut store, D, &mut rng);
        let gru = GruParams::init(&mut store, "gru", D, &mut rng);
        let bank = SlotBankParams::init(&mut store, 1, D, &mut rng);
        let cfg = SlotConfig {
            n: 4,
            p: 2,
            iters: 2,
            tau: 0.5,
            layer_norm: true,
            random_init: true,
            instance_stage: false,
        };
        let feats = Tensor::from_fn(&[HW, D], |_| rng.uniform_in(-1.0, 1.0));
        let mut g = Graph::no_grad();
        let fv = g.input(feats);
        let inputs = prepare_inputs(&mut g, &store, &attn, &cfg, fv);
        let mut r = RngState::new(2);
        let out = semantic_decompose(&mut g, &store, &bank, &attn, &gru, &cfg, &inputs, &mut r);
        assert_eq!(g.value(out.masks).shape(), &[4, HW]);
        assert_eq!(g.value(out.centers).shape(), &[4, D]);
        // Different draws -> different rows.
        assert_ne!(g.value(out.centers).row_slice(0), g.value(out.centers).row_slice(1));
    }
}
