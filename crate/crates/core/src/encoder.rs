//! Frame encoder: patch embedding followed by token-mixing blocks, with the
//! two projection heads that feed feature fusion.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNormParams, LinearParams};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// One RGB frame, channels interleaved row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "Frame::new",
                format!("{}x{}x3 != {} values", height, width, data.len()),
            ));
        }
        Ok(Frame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Frame { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-frame patch features [HW, D] with their grid extents.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub grid: (usize, usize),
}

/// Encoder parameters: patch embedding, mixer blocks, projection heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub patch: LinearParams,
    pub blocks: Vec<MixerBlockParams>,
    /// h_f: appearance projection D -> D.
    pub semantic_head: LinearParams,
    /// h_c: correlation projection HW -> D (resolution-bound).
    pub correspondence_head: LinearParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixerBlockParams {
    pub token_norm: LayerNormParams,
    pub token_mix: LinearParams,
    pub channel_norm: LayerNormParams,
    pub mlp_in: LinearParams,
    pub mlp_out: LinearParams,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut RngState) -> Self {
        let d = cfg.dim;
        let hw = cfg.tokens();
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let patch = LinearParams::init(store, "enc.patch", patch_dim, d, 1.0, rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("enc.block{b}");
            blocks.push(MixerBlockParams {
                token_norm: LayerNormParams::init(store, &format!("{p}.token_norm"), d),
                // Residual branches start near zero so early features stay tame.
                token_mix: LinearParams::init(store, &format!("{p}.token_mix"), hw, hw, 0.1, rng),
                channel_norm: LayerNormParams::init(store, &format!("{p}.channel_norm"), d),
                mlp_in: LinearParams::init(store, &format!("{p}.mlp_in"), d, 2 * d, 1.0, rng),
                mlp_out: LinearParams::init(store, &format!("{p}.mlp_out"), 2 * d, d, 0.1, rng),
            });
        }
        let semantic_head = LinearParams::init(store, "enc.semantic_head", d, d, 1.0, rng);
        // The correlation projection starts small so early semantics form on
        // appearance; its scale is free to grow during training.
        let correspondence_head =
            LinearParams::init(store, "enc.correspondence_head", hw, d, 0.5, rng);
        EncoderParams { patch, blocks, semantic_head, correspondence_head }
    }
}

/// Rearranges a frame into rows of flattened patches: row i holds patch
/// (i / grid_w, i % grid_w), pixels row-major with channels fastest.
pub fn to_patches(frame: &Frame, patch_size: usize) -> Result<Tensor> {
    if patch_size == 0 || !frame.height.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "frame height {} is not divisible by patch size {patch_size}",
            frame.height
        )));
    }
    if !frame.width.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "frame width {} is not divisible by patch size {patch_size}",
            frame.width
        )));
    }
    let gh = frame.height / patch_size;
    let gw = frame.width / patch_size;
    let cols = patch_size * patch_size * 3;
    let mut data = Vec::with_capacity(gh * gw * cols);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let rgb = frame.pixel(gy * patch_size + py, gx * patch_size + px);
                    data.extend_from_slice(&rgb);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, cols], data)
}

/// Encodes one frame to patch features [HW, D] on the given graph.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    frame: &Frame,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let patches = to_patches(frame, cfg.patch_size)?;
    if patches.rows() != cfg.tokens() {
        return Err(Error::Config(format!(
            "frame {}x{} yields {} tokens but the encoder is configured for {}",
            frame.height,
            frame.width,
            patches.rows(),
            cfg.tokens()
        )));
    }
    let pv = g.input(patches);
    let mut x = params.patch.apply(g, store, pv);
    for block in &params.blocks {
        // Token mixing over the patch axis.
        let normed = block.token_norm.apply(g, store, x);
        let wt = g.param(store, block.token_mix.w);
        let bt = g.param(store, block.token_mix.b);
        let mixed = g.matmul(wt, normed);
        let mixed = g.add_col_vec(mixed, bt);
        x = g.add(x, mixed);
        // Channel MLP.
        let normed = block.channel_norm.apply(g, store, x);
        let hidden = block.mlp_in.apply(g, store, normed);
        let act = g.relu(hidden);
        let out = block.mlp_out.apply(g, store, act);
        x = g.add(x, out);
    }
    Ok(x)
}

/// h_f applied to patch features.
pub fn project_semantic(g: &mut Graph, store: &ParamStore, params: &EncoderParams, f: Var) -> Var {
    params.semantic_head.apply(g, store, f)
}

/// h_c applied to correlation rows; the head is resolution-bound.
pub fn project_correspondence(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    c: Var,
) -> Result<Var> {
    let expect = store.value(params.correspondence_head.w).rows();
    let got = g.value(c).cols();
    if got != expect {
        return Err(Error::Config(format!(
            "correlation map has {got} columns but the correspondence head expects {expect}"
        )));
    }
    Ok(params.correspondence_head.apply(g, store, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { resolution: 64, patch_size: 8, dim: 32, blocks: 2 }
    }

    fn setup(cfg: &EncoderConfig, seed: u64) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        let params = EncoderParams::init(&mut store, cfg, &mut rng);
        (store, params)
    }

    fn random_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = RngState::new(seed);
        Frame::new(h, w, (0..h * w * 3).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn encode_shape_is_tokens_by_dim() {
        let cfg = tiny_cfg();
        let (store, params) = setup(&cfg, 1);
        let frame = random_frame(64, 64, 2);
        let mut g = Graph::no_grad();
        let f = encode(&mut g, &store, &params, &frame, &cfg).unwrap();
        assert_eq!(g.value(f).shape(), &[64, 32]);
    }

    #[test]
    fn zero_frame_with_zero_biases_gives_identical_rows() {
        let cfg = tiny_cfg();
        let (store, params) = setup(&cfg, 3);
        let frame = Frame::filled(64, 64, [0.0, 0.0, 0.0]);
        let mut g = Graph::no_grad();
        let f = encode(&mut g, &store, &params, &frame, &cfg).unwrap();
        let t = g.value(f);
        let first = t.row_slice(0).to_vec();
        for r in 1..t.rows() {
            assert_eq!(t.row_slice(r), &first[..], "row {r} differs");
        }
    }

    #[test]
    fn single_patch_difference_shows_up_at_that_token() {
        let cfg = EncoderConfig { blocks: 0, ..tiny_cfg() };
        let (store, params) = setup(&cfg, 4);
        let a = random_frame(64, 64, 5);
        let mut b = a.clone();
        // Perturb exactly patch (2, 3) of the 8x8 grid.
        for py in 0..8 {
            for px in 0..8 {
                b.set_pixel(2 * 8 + py, 3 * 8 + px, [1.0, 0.0, 1.0]);
            }
        }
        let mut g = Graph::no_grad();
        let fa = encode(&mut g, &store, &params, &a, &cfg).unwrap();
        let fb = encode(&mut g, &store, &params, &b, &cfg).unwrap();
        let (ta, tb) = (g.value(fa), g.value(fb));
        let token = 2 * 8 + 3;
        assert_ne!(ta.row_slice(token), tb.row_slice(token));
        for r in 0..ta.rows() {
            if r != token {
                assert_eq!(ta.row_slice(r), tb.row_slice(r), "token {r} changed unexpectedly");
            }
        }
    }

    #[test]
    fn patch_embedding_is_permutation_equivariant() {
        let cfg = EncoderConfig { blocks: 0, ..tiny_cfg() };
        let (store, params) = setup(&cfg, 6);
        let frame = random_frame(64, 64, 7);
        // Swap two patch blocks in pixel space; rows must swap accordingly.
        let mut swapped = frame.clone();
        for py in 0..8 {
            for px in 0..8 {
                let p1 = frame.pixel(py, px);
                let p2 = frame.pixel(5 * 8 + py, 6 * 8 + px);
                swapped.set_pixel(py, px, p2);
                swapped.set_pixel(5 * 8 + py, 6 * 8 + px, p1);
            }
        }
        let mut g = Graph::no_grad();
        let fa = encode(&mut g, &store, &params, &frame, &cfg).unwrap();
        let fb = encode(&mut g, &store, &params, &swapped, &cfg).unwrap();
        let (ta, tb) = (g.value(fa), g.value(fb));
        assert_eq!(ta.row_slice(0), tb.row_slice(5 * 8 + 6));
        assert_eq!(ta.row_slice(5 * 8 + 6), tb.row_slice(0));
        assert_eq!(ta.row_slice(10), tb.row_slice(10));
    }

    #[test]
    fn activations_stay_bounded_on_unit_input() {
        let cfg = tiny_cfg();
        let (store, params) = setup(&cfg, 8);
        for seed in 0..5 {
            let frame = random_frame(64, 64, 100 + seed);
            let mut g = Graph::no_grad();
            let f = encode(&mut g, &store, &params, &frame, &cfg).unwrap();
            assert!(g.value(f).max_abs() < 1e3, "activation explosion");
        }
    }

    #[test]
    fn indivisible_frame_is_a_config_error_naming_the_extent() {
        let cfg = tiny_cfg();
        let (store, params) = setup(&cfg, 9);
        let frame = random_frame(60, 64, 1);
        let mut g = Graph::no_grad();
        let err = encode(&mut g, &store, &params, &frame, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("60"), "error should name the extent: {msg}");
    }

    #[test]
    fn identity_semantic_head_passes_input_through() {
        let cfg = tiny_cfg();
        let (mut store, mut params) = setup(&cfg, 10);
        let eye = Tensor::from_fn(&[32, 32], |i| if i / 32 == i % 32 { 1.0 } else { 0.0 });
        store.set_value(params.semantic_head.w, eye);
        params.semantic_head.b = params.semantic_head.b; // bias already zero
        let mut g = Graph::no_grad();
        let x = g.input(Tensor::from_fn(&[64, 32], |i| (i % 17) as f64 * 0.1));
        let y = project_semantic(&mut g, &store, &params, x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn zero_correlation_projects_to_bias() {
        let cfg = tiny_cfg();
        let (mut store, params) = setup(&cfg, 11);
        let mut rng = RngState::new(12);
        let bias = Tensor::from_fn(&[32], |_| rng.uniform_in(-0.5, 0.5));
        store.set_value(params.correspondence_head.b, bias.clone());
        let mut g = Graph::no_grad();
        let c = g.input(Tensor::zeros(&[64, 64]));
        let y = project_correspondence(&mut g, &store, &params, c).unwrap();
        for r in 0..64 {
            assert_eq!(g.value(y).row_slice(r), bias.data());
        }
    }

    #[test]
    fn heads_match_affine_oracle() {
        let cfg = tiny_cfg();
        let (store, params) = setup(&cfg, 13);
        let mut rng = RngState::new(14);
        let x = Tensor::from_fn(&[64, 32], |_| rng.uniform_in(-1.0, 1.0));
        let mut g = Graph::no_grad();
        let xv = g.input(x.clone());
        let y = project_semantic(&mut g, &store, &params, xv);
        let w = store.value(params.semantic_head.w);
        let b = store.value(params.semantic_head.b);
        let t = g.value(y);
        for i in 0..64 {
            for j in 0..32 {
                let mut acc = b.data()[j];
                for k in 0..32 {
                    acc += x.at2(i, k) * w.at2(k, j);
                }
                assert!((t.at2(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn wrong_resolution_correlation_is_config_error() {
        let cfg = tiny_cfg();
        let (store, params) = setup(&cfg, 15);
        let mut g = Graph::no_grad();
        let c = g.input(Tensor::zeros(&[32, 32]));
        assert!(project_correspondence(&mut g, &store, &params, c).is_err());
    }
}
