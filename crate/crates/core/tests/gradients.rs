use dehamba::blocks::{StandaloneVdb, VdbConfig};
use dehamba::dsm::{dsm_forward, ScanPaths, SsmVars};
use dehamba::gradcheck::{grad_check, model_grad_check, GradCheckOptions};
use dehamba::network::Ablation;
use dehamba::params::Bound;
use dehamba::ssm::SsmParams;
use dehamba::{ModelConfig, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> dehamba::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(tape.value(y).shape().to_vec(), -1.0, 1.0, &mut rng)?;
    let rv = tape.constant(r);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

#[test]
fn scan_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, l, d, n) = (2, 9, 3, 4);
    let params = vec![
        ("x".to_string(), Tensor::uniform(vec![b, l, d], -1.0, 1.0, &mut rng).unwrap()),
        ("delta".to_string(), Tensor::uniform(vec![b, l, d], 0.05, 0.8, &mut rng).unwrap()),
        ("a_log".to_string(), Tensor::uniform(vec![d, n], -1.0, 1.0, &mut rng).unwrap()),
        ("b".to_string(), Tensor::uniform(vec![b, l, n], -1.0, 1.0, &mut rng).unwrap()),
        ("c".to_string(), Tensor::uniform(vec![b, l, n], -1.0, 1.0, &mut rng).unwrap()),
        ("d".to_string(), Tensor::uniform(vec![d], -1.0, 1.0, &mut rng).unwrap()),
    ];
    let report = grad_check(
        |tape, p| {
            let y = tape.selective_scan(p[0], p[1], p[2], p[3], p[4], p[5])?;
            weighted_sum(tape, y, 9)
        },
        &params,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn dsm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = 3;
    let mut params = vec![("map".to_string(), Tensor::uniform(vec![1, c, 3, 4], -1.0, 1.0, &mut rng).unwrap())];
    for k in 0..4 {
        let s = SsmParams::<f64>::init(c, 4, &mut rng).unwrap();
        for (name, t) in [
            ("a_log", s.a_log),
            ("d", s.d),
            ("dt_weight", s.dt_weight),
            ("dt_bias", s.dt_bias),
            ("b_proj", s.b_proj),
            ("c_proj", s.c_proj),
        ] {
            params.push((format!("dir{k}.{name}"), t));
        }
    }
    let report = grad_check(
        |tape, p| {
            let ssm: Vec<SsmVars> = p[1..]
                .chunks(6)
                .map(|v| SsmVars { a_log: v[0], d: v[1], dt_weight: v[2], dt_bias: v[3], b_proj: v[4], c_proj: v[5] })
                .collect();
            let y = dsm_forward(tape, p[0], &ssm, ScanPaths::Four)?;
            weighted_sum(tape, y, 10)
        },
        &params,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
}

fn vdb_report(cfg: VdbConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = StandaloneVdb::<f64>::new(cfg, &mut rng).unwrap();
    let x = Tensor::uniform(vec![1, cfg.channels, 4, 4], -1.0, 1.0, &mut rng).unwrap();
    let mut params = vec![("input".to_string(), x)];
    params.extend(block.params.iter().map(|(n, t)| (n.to_string(), t.clone())));
    let report = grad_check(
        |tape, p| {
            let bound = Bound::from_vars(p[1..].to_vec());
            let y = block.block.forward(tape, &bound, p[0])?;
            weighted_sum(tape, y, seed)
        },
        &params,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < TOL, "{cfg:?}: {report:?}");
    report.max_rel_err
}

#[test]
fn vdb_gradients() {
    vdb_report(VdbConfig::new(4), 5);
}

#[test]
fn vdb_ablation_gradients() {
    let base = VdbConfig::new(4);
    vdb_report(VdbConfig { use_ffn: false, ..base }, 6);
    vdb_report(VdbConfig { use_dconv: false, ..base }, 7);
    vdb_report(VdbConfig { use_silu: false, ..base }, 8);
    vdb_report(VdbConfig { use_hadamard: false, ..base }, 9);
    vdb_report(VdbConfig { paths: ScanPaths::Two, ..base }, 10);
    vdb_report(VdbConfig { paths: ScanPaths::One, ..base }, 11);
}

#[test]
fn tiny_model_gradients_on_small_input() {
    let report = model_grad_check(&ModelConfig::tiny(4), 1, 8, 8, GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
    let v1 = ModelConfig::tiny(4).with_ablation(Ablation::V1);
    let report = model_grad_check(&v1, 2, 8, 4, GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
}
