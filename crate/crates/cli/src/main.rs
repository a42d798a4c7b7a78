//! `rsdh`: train, run and inspect the dehazing network.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use dehamba::bench::{bench_scan, BenchConfig, BenchRow};
use dehamba::checkpoint::Checkpoint;
use dehamba::data::{load_dataset, read_png, stack, synth_pairs, write_dataset, write_png, HazeSpec, Pair};
use dehamba::dsm::ScanPaths;
use dehamba::gradcheck::{model_grad_check, GradCheckOptions};
use dehamba::metrics::MetricReport;
use dehamba::network::Ablation;
use dehamba::train::{train_loop, TrainConfig, TrainOutput, TrainState, FINAL_CHECKPOINT, LOG_FILE};
use dehamba::{build_model, Error, Model, ModelConfig, Tensor};

use config::{pick, ConfigError, ConfigFile};

/// Exit status of a failed command.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::NonFinite { .. }) { 2 } else { 1 };
        Self { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "rsdh", version, about = "Selective state-space dehazing network on the CPU")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a dataset directory or on synthetic pairs.
    Train(TrainArgs),
    /// Dehaze one PNG.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Compare model gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the parameter count of a model configuration.
    Params(ParamsArgs),
    /// Time sequential and associative scans and report their deviation.
    Benchscan(BenchArgs),
    /// Write a synthetic hazy/clear dataset directory.
    Synth(SynthArgs),
}

/// Comma-separated block counts per level, e.g. `2,3,3`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Blocks([usize; 3]);

impl FromStr for Blocks {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))).collect::<Result<_, _>>()?;
        let arr: [usize; 3] = v.try_into().map_err(|v: Vec<usize>| format!("expected 3 counts, got {}", v.len()))?;
        Ok(Self(arr))
    }
}

impl fmt::Display for Blocks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Block variant: `full` or one of the ablations `v1`..`v4`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Variant(Option<Ablation>);

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(Self(match s.to_ascii_lowercase().as_str() {
            "full" => None,
            "v1" => Some(Ablation::V1),
            "v2" => Some(Ablation::V2),
            "v3" => Some(Ablation::V3),
            "v4" => Some(Ablation::V4),
            other => return Err(format!("unknown variant `{other}`, expected full, v1, v2, v3 or v4")),
        }))
    }
}

/// Comma-separated list of sequence lengths.
#[derive(Clone, Debug, PartialEq)]
struct Lengths(Vec<usize>);

impl FromStr for Lengths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))).collect::<Result<_, _>>().map(Self)
    }
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Base channel width C [default: 38, or 4 for gradcheck].
    #[arg(long)]
    c: Option<usize>,
    /// Blocks per level, encoder order [default: 2,3,3, or 1,1,1 for gradcheck].
    #[arg(long)]
    blocks: Option<Blocks>,
    /// SSM state size N [default: 16].
    #[arg(long)]
    state_dim: Option<usize>,
    /// Scan directions: 1, 2 or 4 [default: 4].
    #[arg(long)]
    paths: Option<usize>,
    /// Block variant: full, v1 (no FFN), v2 (no depth-wise conv), v3 (no SiLU), v4 (sum merge) [default: full].
    #[arg(long)]
    variant: Option<Variant>,
    /// FFN hidden width as a multiple of the block width [default: 2].
    #[arg(long)]
    ffn_expand: Option<f64>,
}

const MODEL_KEYS: [&str; 6] = ["c", "blocks", "state_dim", "paths", "variant", "ffn_expand"];

impl ModelArgs {
    fn resolve(&self, file: &ConfigFile, base: ModelConfig) -> Result<ModelConfig, Failure> {
        let c = pick(self.c, file, "c", base.base_channels)?;
        let blocks = pick(self.blocks, file, "blocks", Blocks(base.block_counts))?;
        let paths = pick(self.paths, file, "paths", base.paths.count())?;
        let paths = ScanPaths::try_from(paths).map_err(|e| Failure::usage(e.to_string()))?;
        let mut cfg = ModelConfig {
            base_channels: c,
            block_counts: blocks.0,
            state_dim: pick(self.state_dim, file, "state_dim", base.state_dim)?,
            paths,
            ffn_expand: pick(self.ffn_expand, file, "ffn_expand", base.ffn_expand)?,
            ..base
        };
        if let Some(a) = pick(self.variant, file, "variant", Variant(None))?.0 {
            cfg = cfg.with_ablation(a);
        }
        cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn load_config(path: Option<&Path>, keys: &[&str]) -> Result<ConfigFile, Failure> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let f = ConfigFile::load(p)?;
            f.check_keys(keys)?;
            Ok(f)
        }
    }
}

#[derive(Args, Debug)]
struct HazeArgs {
    /// Lowest mean transmission of synthetic haze [default: 0.35].
    #[arg(long)]
    t_low: Option<f32>,
    /// Highest mean transmission of synthetic haze [default: 0.75].
    #[arg(long)]
    t_high: Option<f32>,
    /// Spatial variation of the transmission map [default: 0.15].
    #[arg(long)]
    variation: Option<f32>,
}

const HAZE_KEYS: [&str; 3] = ["t_low", "t_high", "variation"];

impl HazeArgs {
    fn resolve(&self, file: &ConfigFile) -> Result<HazeSpec, Failure> {
        let d = HazeSpec::default();
        let spec = HazeSpec {
            t_low: pick(self.t_low, file, "t_low", d.t_low)?,
            t_high: pick(self.t_high, file, "t_high", d.t_high)?,
            variation: pick(self.variation, file, "variation", d.variation)?,
            grid: d.grid,
        };
        if !(0.0..=1.0).contains(&spec.t_low) || !(0.0..=1.0).contains(&spec.t_high) || spec.t_low > spec.t_high {
            return Err(Failure::usage(format!("need 0 <= t_low <= t_high <= 1, got {} and {}", spec.t_low, spec.t_high)));
        }
        if !(spec.variation >= 0.0) {
            return Err(Failure::usage(format!("variation must be non-negative, got {}", spec.variation)));
        }
        Ok(spec)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    haze: HazeArgs,
    /// Total optimizer steps [default: 1000].
    #[arg(long)]
    steps: Option<usize>,
    /// Initial learning rate [default: 2e-4].
    #[arg(long)]
    lr_init: Option<f64>,
    /// Final learning rate [default: 1e-6].
    #[arg(long)]
    lr_min: Option<f64>,
    /// Patches per step [default: 4].
    #[arg(long)]
    batch: Option<usize>,
    /// Square patch side, a multiple of 4 [default: 64].
    #[arg(long)]
    patch: Option<usize>,
    /// Adam beta1 [default: 0.9].
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam beta2 [default: 0.999].
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8].
    #[arg(long)]
    eps: Option<f64>,
    /// Seed for initialization, data and patch sampling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Save a checkpoint every this many steps; 0 keeps only the final one [default: 0].
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Output directory for the log, checkpoints and metrics [default: runs/train].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory with input/ and gt/ PNGs; synthetic pairs if absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic training pairs [default: 8].
    #[arg(long)]
    pairs: Option<usize>,
    /// Side of synthetic images [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// Number of held-out synthetic pairs scored after training [default: 4].
    #[arg(long)]
    holdout: Option<usize>,
    /// Continue from a checkpoint written by `train`; its model config wins.
    #[arg(long)]
    resume: Option<PathBuf>,
}

const TRAIN_KEYS: [&str; 16] = [
    "steps",
    "lr_init",
    "lr_min",
    "batch",
    "patch",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "checkpoint_interval",
    "out",
    "data",
    "pairs",
    "size",
    "holdout",
    "resume",
];

fn train_keys() -> Vec<&'static str> {
    let mut keys: Vec<&str> = TRAIN_KEYS.to_vec();
    keys.extend(MODEL_KEYS);
    keys.extend(HAZE_KEYS);
    keys
}

/// Seed offset separating the held-out split from training pairs.
const HOLDOUT_SEED_SALT: u64 = 0x5EED_0F_B10C;

fn mean_report(model: &Model, pairs: &[Pair]) -> Result<(MetricReport, MetricReport), Failure> {
    let (mut out, mut base) = ([0.0f64; 3], [0.0f64; 3]);
    for p in pairs {
        let x = stack(&[&p.hazy])?;
        let gt = stack(&[&p.clear])?;
        let y = model.forward_tensor(&x)?.map(|v| v.clamp(0.0, 1.0));
        for (acc, r) in [(&mut out, MetricReport::evaluate(&y, &gt)?), (&mut base, MetricReport::evaluate(&x, &gt)?)] {
            acc[0] += r.psnr_db;
            acc[1] += r.ssim;
            acc[2] += r.l1;
        }
    }
    let n = pairs.len() as f64;
    let mk = |a: [f64; 3]| MetricReport { psnr_db: a[0] / n, ssim: a[1] / n, l1: a[2] / n };
    Ok((mk(out), mk(base)))
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let file = load_config(a.config.as_deref(), &train_keys())?;
    let d = TrainConfig::default();
    let seed = pick(a.seed, &file, "seed", d.seed)?;
    let cfg = TrainConfig {
        lr_init: pick(a.lr_init, &file, "lr_init", d.lr_init)?,
        lr_min: pick(a.lr_min, &file, "lr_min", d.lr_min)?,
        total_steps: pick(a.steps, &file, "steps", d.total_steps)?,
        batch: pick(a.batch, &file, "batch", d.batch)?,
        patch: pick(a.patch, &file, "patch", d.patch)?,
        beta1: pick(a.beta1, &file, "beta1", d.beta1)?,
        beta2: pick(a.beta2, &file, "beta2", d.beta2)?,
        eps: pick(a.eps, &file, "eps", d.eps)?,
        seed,
        checkpoint_interval: pick(a.checkpoint_interval, &file, "checkpoint_interval", d.checkpoint_interval)?,
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let out = pick(a.out.clone(), &file, "out", PathBuf::from("runs/train"))?;
    let size = pick(a.size, &file, "size", 64usize)?;
    let n_pairs = pick(a.pairs, &file, "pairs", 8usize)?;
    let holdout = pick(a.holdout, &file, "holdout", 4usize)?;
    let haze = a.haze.resolve(&file)?;
    let model_cfg = a.model.resolve(&file, ModelConfig::default())?;
    let data: Option<PathBuf> = match &a.data {
        Some(p) => Some(p.clone()),
        None => file.get("data")?,
    };
    let resume: Option<PathBuf> = match &a.resume {
        Some(p) => Some(p.clone()),
        None => file.get("resume")?,
    };
    if size % 4 != 0 || size < 4 {
        return Err(Failure::usage(format!("size {size} must be a positive multiple of 4")));
    }

    let pairs = match &data {
        Some(dir) => load_dataset(dir)?,
        None => {
            if n_pairs == 0 {
                return Err(Failure::usage("pairs must be at least 1"));
            }
            synth_pairs(n_pairs, size, size, &haze, seed)?
        }
    };
    let mut state = match &resume {
        Some(path) => TrainState::from_checkpoint(&Checkpoint::load(path)?)?,
        None => TrainState::new(build_model(&model_cfg, seed)?),
    };
    eprintln!(
        "training {} parameters for {} steps on {} pairs (starting at step {})",
        state.model.param_count(),
        cfg.total_steps,
        pairs.len(),
        state.opt.step
    );
    let log = train_loop(&mut state, &pairs, &cfg, Some(&TrainOutput { dir: out.clone() }))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("loss {:.6} -> {:.6}", first.loss, last.loss);
    }
    println!("log: {}", out.join(LOG_FILE).display());
    println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());

    if holdout > 0 && size >= dehamba::metrics::SSIM_WINDOW {
        let held = synth_pairs(holdout, size, size, &haze, seed ^ HOLDOUT_SEED_SALT)?;
        let (model, hazy) = mean_report(&state.model, &held)?;
        println!("held-out dehazed: {model}");
        println!("held-out hazy:    {hazy}");
        let path = out.join("metrics.csv");
        let text = format!("split,{}\ndehazed,{}\nhazy,{}\n", MetricReport::CSV_HEADER, model.csv_row(), hazy.csv_row());
        std::fs::write(&path, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Hazy PNG; height and width must be divisible by 4.
    #[arg(long)]
    input: PathBuf,
    /// Where to write the dehazed PNG.
    #[arg(long)]
    output: PathBuf,
    /// Clear reference; prints PSNR and SSIM when given.
    #[arg(long)]
    gt: Option<PathBuf>,
}

fn cmd_infer(a: &InferArgs) -> CmdResult {
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let x = stack(&[&read_png(&a.input)?])?;
    let y = model.forward_tensor(&x)?.map(|v| v.clamp(0.0, 1.0));
    let [_, c, h, w] = y.dims::<4>("infer")?;
    let img = Tensor::new(vec![c, h, w], y.data().to_vec())?;
    write_png(&a.output, &img)?;
    println!("wrote {}", a.output.display());
    if let Some(gt) = &a.gt {
        let gt = stack(&[&read_png(gt)?])?;
        println!("output: {}", MetricReport::evaluate(&y, &gt)?);
        println!("input:  {}", MetricReport::evaluate(&x, &gt)?);
    }
    Ok(())
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory with input/ and gt/ PNGs.
    #[arg(long)]
    data: PathBuf,
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let pairs = load_dataset(&a.data)?;
    println!("index,{}", MetricReport::CSV_HEADER);
    for (i, p) in pairs.iter().enumerate() {
        let (r, _) = mean_report(&model, std::slice::from_ref(p))?;
        println!("{i},{}", r.csv_row());
    }
    let (r, base) = mean_report(&model, &pairs)?;
    println!("mean,{}", r.csv_row());
    println!("hazy,{}", base.csv_row());
    Ok(())
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Side of the square test input, a multiple of 4 [default: 16].
    #[arg(long)]
    size: Option<usize>,
    /// Seed for parameters and input [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Largest accepted relative error [default: 1e-3].
    #[arg(long)]
    tol: Option<f64>,
    /// Check at most this many entries per parameter tensor [default: all].
    #[arg(long)]
    max_entries: Option<usize>,
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let mut keys = vec!["size", "seed", "tol", "max_entries"];
    keys.extend(MODEL_KEYS);
    let file = load_config(a.config.as_deref(), &keys)?;
    let cfg = a.model.resolve(&file, ModelConfig::tiny(4))?;
    let size = pick(a.size, &file, "size", 16usize)?;
    let seed = pick(a.seed, &file, "seed", 0u64)?;
    let tol = pick(a.tol, &file, "tol", 1e-3f64)?;
    let max_entries: Option<usize> = match a.max_entries {
        Some(v) => Some(v),
        None => file.get("max_entries")?,
    };
    let opts = GradCheckOptions { max_entries_per_param: max_entries, ..Default::default() };
    let r = model_grad_check(&cfg, seed, size, size, opts)?;
    let (name, idx) = r.worst.clone().unwrap_or_default();
    println!(
        "checked {} entries: max relative error {:.3e} at {name}[{idx}] (autodiff {:.6e}, numeric {:.6e})",
        r.entries_checked, r.max_rel_err, r.worst_autodiff, r.worst_numeric
    );
    if r.max_rel_err < tol {
        println!("PASS (< {tol:e})");
        Ok(())
    } else {
        Err(Failure { code: 2, msg: format!("FAIL: {:.3e} >= {tol:e}", r.max_rel_err) })
    }
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

fn cmd_params(a: &ParamsArgs) -> CmdResult {
    let file = load_config(a.config.as_deref(), &MODEL_KEYS)?;
    let cfg = a.model.resolve(&file, ModelConfig::default())?;
    println!("{}", build_model(&cfg, 0)?.param_count());
    Ok(())
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long = "len", default_value = "256,512,1024,2048")]
    lengths: Lengths,
    /// Channels per token.
    #[arg(long, default_value_t = 16)]
    dinner: usize,
    /// SSM state size.
    #[arg(long, default_value_t = 16)]
    nstate: usize,
    /// Sequences per run.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Timing repetitions; the minimum is reported.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_benchscan(a: &BenchArgs) -> CmdResult {
    if a.lengths.0.iter().any(|&l| l == 0) || a.dinner == 0 || a.nstate == 0 || a.batch == 0 {
        return Err(Failure::usage("lengths and dimensions must be positive"));
    }
    let cfg = BenchConfig { batch: a.batch, dinner: a.dinner, nstate: a.nstate, reps: a.reps, seed: a.seed };
    println!("{}", BenchRow::CSV_HEADER);
    for row in bench_scan(&a.lengths.0, &cfg)? {
        println!("{}", row.csv_row());
    }
    Ok(())
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives input/ and gt/.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Image side.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    haze: HazeArgs,
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    if a.count == 0 || a.size == 0 {
        return Err(Failure::usage("count and size must be positive"));
    }
    let spec = a.haze.resolve(&ConfigFile::default())?;
    let pairs = synth_pairs(a.count, a.size, a.size, &spec, a.seed)?;
    write_dataset(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

/// Applies `RSDH_THREADS` (0 or unset: one thread per core).
fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var("RSDH_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| Failure::usage(format!("RSDH_THREADS must be a count, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    configure_threads()?;
    match &cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Params(a) => cmd_params(a),
        Command::Benchscan(a) => cmd_benchscan(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
