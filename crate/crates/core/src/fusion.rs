//! Dense inter-frame feature correlation and the fusion of appearance and
//! correspondence projections into one representation.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::FusionConfig;
use crate::encoder::{project_correspondence, project_semantic, EncoderParams};
use crate::error::Result;
use crate::tensor::Tensor;

/// Raw inner-product correlation between the patches of two frames.
#[derive(Debug, Clone)]
pub struct CorrelationMap {
    pub values: Tensor,
    pub source: usize,
    pub target: usize,
}

/// C = F_t F_j^T, with no normalization or temperature.
pub fn correlate(g: &mut Graph, f_t: Var, f_j: Var) -> Var {
    g.matmul_nt(f_t, f_j)
}

/// R = h_f(F) + h_c(C), with each side switchable for the feature-usage
/// ablations. Disabling a side removes its term exactly.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &FusionConfig,
    features: Var,
    correlation: Var,
) -> Result<Var> {
    match (cfg.use_semantic, cfg.use_correlation) {
        (true, true) => {
            let a = project_semantic(g, store, params, features);
            let b = project_correspondence(g, store, params, correlation)?;
            Ok(g.add(a, b))
        }
        (true, false) => Ok(project_semantic(g, store, params, features)),
        (false, true) => project_correspondence(g, store, params, correlation),
        (false, false) => Err(crate::error::Error::Config(
            "fusion requires at least one of use_semantic / use_correlation".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::config::EncoderConfig;
    use crate::encoder::EncoderParams;
    use crate::rng::RngState;

    fn setup() -> (ParamStore, EncoderParams, EncoderConfig) {
        let cfg = EncoderConfig { resolution: 32, patch_size: 8, dim: 8, blocks: 1 };
        let mut store = ParamStore::new();
        let mut rng = RngState::new(21);
        let params = EncoderParams::init(&mut store, &cfg, &mut rng);
        (store, params, cfg)
    }

    #[test]
    fn orthonormal_rows_correlate_to_identity() {
        let f = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let mut g = Graph::no_grad();
        let v = g.input(f);
        let c = correlate(&mut g, v, v);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(g.value(c).at2(i, j), want);
            }
        }
    }

    #[test]
    fn zero_target_gives_zero_map() {
        let mut rng = RngState::new(2);
        let f = Tensor::from_fn(&[4, 3], |_| rng.uniform());
        let mut g = Graph::no_grad();
        let a = g.input(f);
        let b = g.input(Tensor::zeros(&[4, 3]));
        let c = correlate(&mut g, a, b);
        assert!(g.value(c).max_abs() == 0.0);
    }

    #[test]
    fn correlation_matches_triple_loop_oracle() {
        let mut rng = RngState::new(3);
        let ft = Tensor::from_fn(&[4, 3], |_| rng.uniform_in(-1.0, 1.0));
        let fj = Tensor::from_fn(&[4, 3], |_| rng.uniform_in(-1.0, 1.0));
        let mut g = Graph::no_grad();
        let a = g.input(ft.clone());
        let b = g.input(fj.clone());
        let c = correlate(&mut g, a, b);
        for u in 0..4 {
            for v in 0..4 {
                let mut want = 0.0;
                for k in 0..3 {
                    want += ft.at2(u, k) * fj.at2(v, k);
                }
                assert!((g.value(c).at2(u, v) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn self_correlation_diagonal_is_squared_norm() {
        let mut rng = RngState::new(4);
        let f = Tensor::from_fn(&[5, 6], |_| rng.uniform_in(-1.0, 1.0));
        let mut g = Graph::no_grad();
        let v = g.input(f.clone());
        let c = correlate(&mut g, v, v);
        for u in 0..5 {
            let norm_sq: f64 = f.row_slice(u).iter().map(|x| x * x).sum();
            assert!((g.value(c).at2(u, u) - norm_sq).abs() <= 1e-12);
            assert!(g.value(c).at2(u, u) >= 0.0);
        }
    }

    #[test]
    fn correlation_transposes_under_argument_swap() {
        let mut rng = RngState::new(5);
        let ft = Tensor::from_fn(&[4, 3], |_| rng.uniform_in(-1.0, 1.0));
        let fj = Tensor::from_fn(&[4, 3], |_| rng.uniform_in(-1.0, 1.0));
        let mut g = Graph::no_grad();
        let a = g.input(ft);
        let b = g.input(fj);
        let c_ab = correlate(&mut g, a, b);
        let c_ba = correlate(&mut g, b, a);
        for u in 0..4 {
            for v in 0..4 {
                assert_eq!(g.value(c_ab).at2(u, v), g.value(c_ba).at2(v, u));
            }
        }
    }

    #[test]
    fn zeroed_correlation_head_equals_semantic_only_bit_exactly() {
        let (mut store, params, cfg) = setup();
        let hw = cfg.tokens();
        store.set_value(params.correspondence_head.w, Tensor::zeros(&[hw, cfg.dim]));
        store.set_value(params.correspondence_head.b, Tensor::zeros(&[cfg.dim]));
        let mut rng = RngState::new(6);
        let f = Tensor::from_fn(&[hw, cfg.dim], |_| rng.uniform_in(-1.0, 1.0));
        let c = Tensor::from_fn(&[hw, hw], |_| rng.uniform_in(-1.0, 1.0));

        let mut g = Graph::no_grad();
        let fv = g.input(f);
        let cv = g.input(c);
        let fused = fuse(
            &mut g,
            &store,
            &params,
            &FusionConfig { use_semantic: true, use_correlation: true },
            fv,
            cv,
        )
        .unwrap();
        let rgb_only = fuse(
            &mut g,
            &store,
            &params,
            &FusionConfig { use_semantic: true, use_correlation: false },
            fv,
            cv,
        )
        .unwrap();
        assert_eq!(g.value(fused), g.value(rgb_only));
    }

    #[test]
    fn correlation_only_drops_semantic_term() {
        let (store, params, cfg) = setup();
        let hw = cfg.tokens();
        let mut rng = RngState::new(7);
        let f = Tensor::from_fn(&[hw, cfg.dim], |_| rng.uniform_in(-1.0, 1.0));
        let c = Tensor::from_fn(&[hw, hw], |_| rng.uniform_in(-1.0, 1.0));
        let mut g = Graph::no_grad();
        let fv = g.input(f);
        let cv = g.input(c);
        let corr_only = fuse(
            &mut g,
            &store,
            &params,
            &FusionConfig { use_semantic: false, use_correlation: true },
            fv,
            cv,
        )
        .unwrap();
        let head_only = project_correspondence(&mut g, &store, &params, cv).unwrap();
        assert_eq!(g.value(corr_only), g.value(head_only));

        assert!(fuse(
            &mut g,
            &store,
            &params,
            &FusionConfig { use_semantic: false, use_correlation: false },
            fv,
            cv,
        )
        .is_err());
    }
}
