use dehamba::checkpoint::Checkpoint;
use dehamba::dsm::ScanPaths;
use dehamba::network::{Ablation, DEFAULT_BASE_CHANNELS};
use dehamba::{build_model, param_count, Error, Model, ModelConfig, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn pw(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

fn vdb(cfg: &ModelConfig, c: usize) -> usize {
    let n = cfg.state_dim;
    let norm = 2 * c;
    let ssm = c * n + c + c * c + c + 2 * n * c;
    let dw = 9 * c + c;
    let hidden = (cfg.ffn_expand * c as f64).round() as usize;
    let mut total = norm + 3 * pw(c, c) + cfg.paths.count() * ssm + norm;
    if cfg.use_dconv {
        total += dw;
    }
    if cfg.use_ffn {
        total += norm + dw + pw(c, hidden) + pw(hidden, c);
    }
    total
}

/// Parameter count from the layer list alone.
fn analytic(cfg: &ModelConfig) -> usize {
    let c = cfg.base_channels;
    let [n1, n2, n3] = cfg.block_counts;
    conv(3, c, 3)
        + n1 * vdb(cfg, c)
        + conv(c, 2 * c, 3)
        + n2 * vdb(cfg, 2 * c)
        + conv(2 * c, 4 * c, 3)
        + n3 * vdb(cfg, 4 * c)
        + conv(4 * c, 2 * c, 3)
        + pw(4 * c, 2 * c)
        + n2 * vdb(cfg, 2 * c)
        + conv(2 * c, c, 3)
        + n1 * vdb(cfg, 2 * c)
        + conv(2 * c, 3, 3)
}

fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(vec![b, 3, h, w], 0.0, 1.0, &mut rng).unwrap()
}

#[test]
fn default_budget_and_analytic_count() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.base_channels, DEFAULT_BASE_CHANNELS);
    let n = param_count(&build_model(&cfg, 0).unwrap());
    assert_eq!(n, analytic(&cfg));
    assert!((1_600_000..=2_000_000).contains(&n), "{n}");
}

#[test]
fn analytic_count_covers_variants() {
    let mut cfgs = vec![ModelConfig::tiny(4), ModelConfig { block_counts: [2, 1, 3], ..ModelConfig::tiny(6) }];
    for a in Ablation::ALL {
        cfgs.push(ModelConfig::tiny(5).with_ablation(a));
    }
    for paths in [ScanPaths::One, ScanPaths::Two] {
        cfgs.push(ModelConfig { paths, ..ModelConfig::tiny(4) });
    }
    cfgs.push(ModelConfig { state_dim: 3, ffn_expand: 1.5, ..ModelConfig::tiny(7) });
    for cfg in cfgs {
        assert_eq!(build_model(&cfg, 1).unwrap().param_count(), analytic(&cfg), "{cfg:?}");
    }
}

#[test]
fn construction_is_seeded() {
    let cfg = ModelConfig::tiny(4);
    assert_eq!(build_model(&cfg, 3).unwrap().params, build_model(&cfg, 3).unwrap().params);
    assert_ne!(build_model(&cfg, 3).unwrap().params, build_model(&cfg, 4).unwrap().params);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_residual_is_exact_identity(hq in 1usize..5, wq in 1usize..5, seed in any::<u64>()) {
        let mut m = build_model(&ModelConfig::tiny(4), seed).unwrap();
        m.zero_residual();
        let x = image(2, 4 * hq, 4 * wq, seed);
        prop_assert_eq!(m.forward_tensor(&x).unwrap(), x);
    }
}

#[test]
fn batch_elements_are_independent() {
    let m = build_model(&ModelConfig::tiny(4), 5).unwrap();
    let x = image(3, 8, 12, 6);
    let y = m.forward_tensor(&x).unwrap();
    let per = 3 * 8 * 12;
    for b in 0..3 {
        let xb = Tensor::new(vec![1, 3, 8, 12], x.data()[b * per..][..per].to_vec()).unwrap();
        let yb = m.forward_tensor(&xb).unwrap();
        assert!(yb.data().iter().zip(&y.data()[b * per..]).all(|(p, q)| (p - q).abs() < 1e-6));
    }
}

#[test]
fn rejects_bad_inputs() {
    let m = build_model(&ModelConfig::tiny(4), 0).unwrap();
    let err = m.forward_tensor(&image(1, 63, 64, 0)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(err.to_string().contains("divisible by 4"), "{err}");
    let gray = Tensor::zeros(vec![1, 1, 8, 8]).unwrap();
    assert!(matches!(m.forward_tensor(&gray), Err(Error::Dim { .. })));
    assert!(m.forward_tensor(&Tensor::zeros(vec![3, 8, 8]).unwrap()).is_err());
}

#[test]
fn ablations_run_and_keep_identity() {
    let x = image(1, 8, 8, 2);
    let mut cfgs: Vec<ModelConfig> = Ablation::ALL.iter().map(|&a| ModelConfig::tiny(4).with_ablation(a)).collect();
    cfgs.extend([ScanPaths::One, ScanPaths::Two, ScanPaths::Four].map(|paths| ModelConfig { paths, ..ModelConfig::tiny(4) }));
    for cfg in cfgs {
        let mut m = build_model(&cfg, 1).unwrap();
        let y = m.forward_tensor(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
        m.zero_residual();
        assert_eq!(m.forward_tensor(&x).unwrap(), x, "{cfg:?}");
    }
}

#[test]
fn f64_and_f32_models_agree() {
    let m = build_model(&ModelConfig::tiny(4), 8).unwrap();
    let x = image(1, 8, 8, 9);
    let y32 = m.forward_tensor(&x).unwrap();
    let y64 = m.cast::<f64>().forward_tensor(&x.cast()).unwrap();
    assert!(y32.cast::<f64>().max_abs_diff(&y64).unwrap() < 1e-4);
}

#[test]
fn checkpoint_restores_outputs() {
    let m = build_model(&ModelConfig::tiny(4).with_ablation(Ablation::V3), 12).unwrap();
    let back: Model = Checkpoint::from_bytes(&Checkpoint::from_model(&m).to_bytes()).unwrap().to_model().unwrap();
    let x = image(1, 8, 8, 1);
    assert_eq!(back.forward_tensor(&x).unwrap(), m.forward_tensor(&x).unwrap());
}
