use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn eye(d: usize) -> Tensor<f64> {
    Tensor::from_vec([d, d], (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap()
}

fn attn_vars(g: &mut Graph<f64>, p: &AttnParams<f64>) -> AttnVars {
    AttnVars {
        ln_gamma: g.param(p.ln_gamma.clone()),
        ln_beta: g.param(p.ln_beta.clone()),
        w_q: g.param(p.w_q.clone()),
        w_k: g.param(p.w_k.clone()),
        w_v: g.param(p.w_v.clone()),
        w_o: g.param(p.w_o.clone()),
    }
}

fn identity_attn(d: usize) -> AttnParams<f64> {
    AttnParams {
        ln_gamma: Tensor::ones([d]),
        ln_beta: Tensor::zeros([d]),
        w_q: eye(d),
        w_k: eye(d),
        w_v: eye(d),
        w_o: eye(d),
    }
}

#[test]
fn identity_projections_give_normalized_tokens() {
    let d = 3;
    let mut g = Graph::new();
    let z = g.constant(Tensor::from_vec([1, 1, 2, d], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap());
    let p = attn_vars(&mut g, &identity_attn(d));
    let (q, k, v) = qkv_project(&mut g, z, &p).unwrap();
    let first = [-1.224_744_871, 0.0, 1.224_744_871];
    for var in [q, k, v] {
        for (a, b) in g.value(var).data()[..3].iter().zip(first) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(g.value(var), g.value(q));
    }
}

#[test]
fn zero_tokens_project_to_zero() {
    let mut r = rng(0);
    let d = 8;
    let params = AttnParams::<f64>::init(d, &mut r);
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros([1, 2, 3, d]));
    let p = attn_vars(&mut g, &params);
    let (q, k, v) = qkv_project(&mut g, z, &p).unwrap();
    for var in [q, k, v] {
        assert!(g.value(var).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn single_patch_spatial_attention_is_a_projected_value() {
    let mut r = rng(1);
    let d = 4;
    let params = AttnParams::<f64>::init(d, &mut r);
    let mut g = Graph::new();
    let z = g.constant(Tensor::randn([1, 1, 3, d], 1.0, &mut r));
    let p = attn_vars(&mut g, &params);
    let out = spatial_attention(&mut g, z, &p, 2).unwrap();
    assert!(out.weights.data().iter().all(|&w| w == 1.0));
    let (_, _, v) = qkv_project(&mut g, z, &p).unwrap();
    let proj = g.linear(v, p.w_o).unwrap();
    let want = g.add(proj, z).unwrap();
    assert!(g.value(out.output).max_abs_diff(g.value(want)) < 1e-12);
}

#[test]
fn identical_patches_get_uniform_spatial_weights() {
    let mut r = rng(2);
    let (patches, slots, d) = (5, 2, 6);
    let token = Tensor::<f64>::randn([d], 1.0, &mut r);
    let mut data = Vec::new();
    for _ in 0..patches * slots {
        data.extend_from_slice(token.data());
    }
    let params = AttnParams::<f64>::init(d, &mut r);
    let mut g = Graph::new();
    let z = g.constant(Tensor::from_vec([1, patches, slots, d], data).unwrap());
    let p = attn_vars(&mut g, &params);
    let (q, k, v) = qkv_project(&mut g, z, &p).unwrap();
    let att = attend(&mut g, q, k, v, 3, AttentionAxis::Spatial).unwrap();
    for &w in att.weights.data() {
        assert!((w - 0.2).abs() < 1e-12);
    }
    assert!(g.value(att.output).max_abs_diff(g.value(v)) < 1e-12);
}

#[test]
fn temporal_stream_equal_to_class_token_gets_uniform_weights() {
    let mut r = rng(3);
    let (frames, d) = (4, 4);
    let token = Tensor::<f64>::randn([d], 1.0, &mut r);
    let patches = 2;
    let mut data = Vec::new();
    for _ in 0..patches * (frames + 1) {
        data.extend_from_slice(token.data());
    }
    let params = AttnParams::<f64>::init(d, &mut r);
    let mut g = Graph::new();
    let z = g.constant(Tensor::from_vec([1, patches, frames + 1, d], data).unwrap());
    let p = attn_vars(&mut g, &params);
    let (q, k, v) = qkv_project(&mut g, z, &p).unwrap();
    let att = attend(&mut g, q, k, v, 2, AttentionAxis::Temporal).unwrap();
    assert_eq!(att.weights.shape(), &[1, patches, frames + 1, 2, frames + 1]);
    for &w in att.weights.data() {
        assert!((w - 0.2).abs() < 1e-12);
    }
    assert!(g.value(att.output).max_abs_diff(g.value(v)) < 1e-12);
}

#[test]
fn zero_projections_split_weight_evenly_over_one_frame() {
    let mut r = rng(4);
    let d = 2;
    let mut params = AttnParams::<f64>::init(d, &mut r);
    params.w_q = Tensor::zeros([d, d]);
    params.w_k = Tensor::zeros([d, d]);
    let mut g = Graph::new();
    let z = g.constant(Tensor::randn([1, 3, 2, d], 1.0, &mut r));
    let p = attn_vars(&mut g, &params);
    let out = temporal_attention(&mut g, z, &p, 1).unwrap();
    assert!(out.weights.data().iter().all(|&w| w == 0.5));
}

#[test]
fn mlp_with_zero_output_map_is_residual() {
    let mut r = rng(5);
    let d = 6;
    let mut params = MlpParams::<f64>::init(d, 12, &mut r);
    params.w2 = Tensor::zeros([12, d]);
    let mut g = Graph::new();
    let zt = Tensor::randn([1, 2, 3, d], 1.0, &mut r);
    let z = g.constant(zt.clone());
    let p = MlpVars {
        ln_gamma: g.param(params.ln_gamma),
        ln_beta: g.param(params.ln_beta),
        w1: g.param(params.w1),
        w2: g.param(params.w2),
    };
    let out = block_mlp(&mut g, z, &p).unwrap();
    assert_eq!(g.value(out), &zt);
}

#[test]
fn mlp_of_zero_token_is_zero() {
    let d = 4;
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros([1, 1, 1, d]));
    let p = MlpVars {
        ln_gamma: g.param(Tensor::ones([d])),
        ln_beta: g.param(Tensor::zeros([d])),
        w1: g.param(eye(d)),
        w2: g.param(eye(d)),
    };
    let out = block_mlp(&mut g, z, &p).unwrap();
    assert!(g.value(out).data().iter().all(|&x| x == 0.0));
}

#[test]
fn geometry_validation() {
    let mut cfg = ModelConfig::tiny();
    cfg.heads = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = ModelConfig::tiny();
    cfg.classes = 1;
    assert!(cfg.validate().is_err());
    for cfg in [ModelConfig::full_scale(), ModelConfig::desk(), ModelConfig::tiny()] {
        cfg.validate().unwrap();
    }
    assert_eq!(ModelConfig::full_scale().head_dim(), 64);
}

#[test]
fn tiny_forward_shape_and_determinism() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, &mut rng(6)).unwrap();
    let frames = Tensor::randn(cfg.frame_shape(2), 1.0, &mut rng(7));
    let a = predict_logits(&params, &cfg, frames.clone()).unwrap();
    let b = predict_logits(&params, &cfg, frames).unwrap();
    assert_eq!(a.shape(), &[2, 3]);
    assert!(a.all_finite());
    assert_eq!(a.data(), b.data());
}

#[test]
fn wrong_frame_count_is_a_configuration_error() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, &mut rng(8)).unwrap();
    let mut shape = cfg.frame_shape(1);
    shape[1] += 1;
    let err = predict_logits(&params, &cfg, Tensor::zeros(shape)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn full_scale_geometry_gives_seven_logits() {
    let cfg = ModelConfig::full_scale();
    let params = ModelParams::<f32>::init(&cfg, &mut rng(9)).unwrap();
    let frames = Tensor::randn(cfg.frame_shape(1), 1.0, &mut rng(10));
    let logits = predict_logits(&params, &cfg, frames).unwrap();
    assert_eq!(logits.shape(), &[1, 7]);
    assert!(logits.all_finite());
}

#[test]
fn flat_round_trip_and_cast() {
    for cfg in [
        ModelConfig::tiny(),
        ModelConfig::desk(),
        ModelConfig {
            spatial: false,
            ..ModelConfig::desk()
        },
        ModelConfig {
            spatial: false,
            temporal: false,
            ..ModelConfig::tiny()
        },
    ] {
        let params = ModelParams::<f32>::init(&cfg, &mut rng(11)).unwrap();
        let flat: Vec<Tensor<f32>> = params.tensors().into_iter().cloned().collect();
        let back = ModelParams::from_tensors(&cfg, flat).unwrap();
        assert_eq!(back, params);
        let wide: ModelParams<f64> = params.cast(&cfg).unwrap();
        assert_eq!(wide.cast::<f32>(&cfg).unwrap(), params);
        assert_eq!(params.named_tensors().len(), params.tensors().len());

        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let order: Vec<usize> = vars.vars().iter().map(|v| v.index()).collect();
        assert!(order.windows(2).all(|w| w[0] + 1 == w[1]));
        assert_eq!(order.len(), params.tensors().len());
    }
}

#[test]
fn from_tensors_rejects_other_geometry() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f32>::init(&cfg, &mut rng(12)).unwrap();
    let flat: Vec<Tensor<f32>> = params.tensors().into_iter().cloned().collect();
    let other = ModelConfig {
        dim: 8,
        ..cfg
    };
    assert!(ModelParams::<f32>::from_tensors(&other, flat.clone()).is_err());
    assert!(ModelParams::<f32>::from_tensors(&cfg, flat[1..].to_vec()).is_err());
}

#[test]
fn readout_follows_the_enabled_stages() {
    let mut cfg = ModelConfig::tiny();
    assert_eq!(cfg.readout(), Readout::ClassToken);
    cfg.temporal = false;
    assert_eq!(cfg.readout(), Readout::FrameMean);
    assert!(cfg.uses_time_embedding());
    cfg.spatial = false;
    assert!(!cfg.uses_time_embedding());
}

#[test]
fn attention_free_model_ignores_frame_order() {
    let cfg = ModelConfig {
        spatial: false,
        temporal: false,
        ..ModelConfig::tiny()
    };
    let params = ModelParams::<f64>::init(&cfg, &mut rng(13)).unwrap();
    let frames = Tensor::<f64>::randn(cfg.frame_shape(1), 1.0, &mut rng(14));
    let per = frames.numel() / cfg.frames;
    let mut reversed = frames.clone();
    for t in 0..cfg.frames {
        let src = cfg.frames - 1 - t;
        reversed.data_mut()[t * per..(t + 1) * per].copy_from_slice(&frames.data()[src * per..(src + 1) * per]);
    }
    let a = predict_logits(&params, &cfg, frames).unwrap();
    let b = predict_logits(&params, &cfg, reversed).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut r = rng(20);
    let shape = [2, 3, 4, 4];
    let inputs: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(shape, 1.0, &mut r)).collect();
    for axis in [AttentionAxis::Spatial, AttentionAxis::Temporal] {
        let report = crate::tensor::grad_check(
            |g, p| {
                let att = attend(g, p[0], p[1], p[2], 2, axis)?;
                let weighted = g.mul(att.output, p[3])?;
                Ok(g.sum(weighted))
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{axis:?}: {report:?}");
    }
}

#[test]
fn tiny_model_gradients_match_finite_differences() {
    for (spatial, temporal) in [(true, true), (false, true), (true, false), (false, false)] {
        let cfg = ModelConfig {
            spatial,
            temporal,
            ..ModelConfig::tiny()
        };
        let params = ModelParams::<f64>::init(&cfg, &mut rng(21)).unwrap();
        let frames = Tensor::<f64>::randn(cfg.frame_shape(2), 1.0, &mut rng(22));
        let flat: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
        let report = crate::tensor::grad_check(
            |g, p| {
                let vars = ModelVars::from_flat(&params, p);
                let x = g.constant(frames.clone());
                let logits = forward(g, x, &vars, &cfg).map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
                let lp = g.log_softmax(logits, 1)?;
                let picked = g.take_last(lp, vec![0, 2])?;
                Ok(g.mean(picked))
            },
            &flat,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{spatial} {temporal}: {report:?}");
    }
}
