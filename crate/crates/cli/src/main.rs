//! `medmfg` command-line tool.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration or usage,
//! 3 I/O, 4 training fault, 5 checkpoint or schema, 6 comparison mismatch.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use medmfg::config::RunConfig;
use medmfg::data::fseb::{load_embeddings, save_embeddings_with_source};
use medmfg::data::{generate_synthetic, SyntheticSpec};
use medmfg::eval::{compare_paired, evaluate, EvalReport};
use medmfg::gradcheck::run_all;
use medmfg::model::{budget_lines, ModelDims, ModelParams};
use medmfg::tensor::GradCheckConfig;
use medmfg::training::checkpoint::{check_dims, load_checkpoint, save_checkpoint, Checkpoint};
use medmfg::training::train_with;
use medmfg::{par, Error};

#[derive(Parser)]
#[command(name = "medmfg", version, about = "Few-shot feature augmentation on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster embedding file.
    Synth(SynthArgs),
    /// Meta-train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint over sampled episodes.
    Eval(EvalArgs),
    /// Paired comparison of two reports.
    Compare(CompareArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Parameter counts of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    centroid_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    heavy_tail: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DimsPreset {
    Toy,
    Default,
}

impl DimsPreset {
    fn dims(self) -> ModelDims {
        match self {
            DimsPreset::Toy => ModelDims::toy(),
            DimsPreset::Default => ModelDims::default_dims(),
        }
    }
}

/// Flags shared by train and eval.
#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_sfm: bool,
    #[arg(long)]
    no_ifm: bool,
    #[arg(long)]
    no_vsgm: bool,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    generate: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Dimension preset applied before the config file.
    #[arg(long, value_enum)]
    dims: Option<DimsPreset>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    vae_depth: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "toy")]
    dims: DimsPreset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => 3,
            Error::TrainingFault { .. } => 4,
            Error::Format(_) | Error::Corruption { .. } | Error::Schema(_) => 5,
            Error::Mismatch(_) => 6,
            Error::InvalidCheck(_) => 1,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

/// Prefixes any library error with the file it concerns.
fn at(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        Failure {
            code: f.code,
            message: format!("{}: {}", path.display(), f.message),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    let spec = SyntheticSpec {
        n_classes: a.classes,
        dim: a.dim,
        per_class_count: a.per_class,
        centroid_scale: a.centroid_scale,
        within_class_sigma: a.sigma,
        heavy_tail_fraction: a.heavy_tail,
        seed: a.seed,
    };
    let ds = generate_synthetic(&spec)?;
    let source = format!(
        "synthetic classes={} dim={} per_class={} sigma={} centroid_scale={} heavy_tail={} seed={}",
        a.classes, a.dim, a.per_class, a.sigma, a.centroid_scale, a.heavy_tail, a.seed
    );
    save_embeddings_with_source(&ds, &a.out, &source).map_err(at(&a.out))?;
    println!("classes\t{}", ds.n_classes());
    println!("dim\t{}", ds.dim());
    println!("vectors\t{}", ds.n_vectors());
    println!("fingerprint\t{}", ds.fingerprint());
    Ok(())
}

/// Config file, then `--set`, then dedicated flags. `train` picks which
/// side of the train/eval keys the episode flags address.
fn apply_common(cfg: &mut RunConfig, c: &Common, train: bool) -> Result<(), Error> {
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    let side = if train { "train" } else { "eval" };
    let mut put = |key: &str, v: Option<String>| -> Result<(), Error> {
        match v {
            Some(v) => cfg.set(key, &v),
            None => Ok(()),
        }
    };
    put("seed", c.seed.map(|x| x.to_string()))?;
    put(&format!("{side}.n_way"), c.n_way.map(|x| x.to_string()))?;
    put(&format!("{side}.k_shot"), c.k_shot.map(|x| x.to_string()))?;
    put(&format!("{side}.queries"), c.queries.map(|x| x.to_string()))?;
    put(&format!("{side}.episodes"), c.episodes.map(|x| x.to_string()))?;
    put(&format!("{side}.generate"), c.generate.map(|x| x.to_string()))?;
    if c.no_sfm {
        cfg.toggles.sfm = false;
    }
    if c.no_ifm {
        cfg.toggles.ifm = false;
    }
    if c.no_vsgm {
        cfg.toggles.vsgm = false;
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::default();
    if let Some(p) = a.dims {
        cfg.dims = p.dims();
    }
    apply_common(&mut cfg, &a.common, true)?;
    if let Some(x) = a.alpha {
        cfg.alpha = x;
    }
    if let Some(x) = a.beta {
        cfg.beta = x;
    }
    if let Some(x) = a.lr {
        cfg.train_lr = x;
    }
    if let Some(x) = a.vae_depth {
        cfg.dims.vae_depth = x;
    }
    cfg.validate()?;

    let canonical = cfg.canonical();
    let fingerprint = cfg.fingerprint();
    print!("{canonical}");
    println!("# fingerprint: {fingerprint}");

    let ds = load_embeddings(&a.data).map_err(at(&a.data))?;
    let train_cfg = cfg.train_config();
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log"));
    let mut log = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let mut head = String::new();
    for line in canonical.lines() {
        head.push_str(&format!("# {line}\n"));
    }
    head.push_str(&format!("# fingerprint: {fingerprint}\n# data: {}\nepisode\ttotal\tcons\tkl\tcls\n", ds.fingerprint()));
    log.write_all(head.as_bytes()).map_err(|e| io_failure(&log_path, e))?;

    let params = ModelParams::init(cfg.dims, cfg.seed)?;
    let mut write_err = None;
    let total = train_cfg.episodes;
    let outcome = train_with(&ds, params, &train_cfg, |line| {
        if write_err.is_none() {
            if let Err(e) = writeln!(log, "{line}") {
                write_err = Some(e);
            }
        }
        let done = line.episode + 1;
        if done % 500 == 0 || done == total {
            eprintln!("episode {done}/{total}  loss {:.4}", line.loss.total);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_failure(&log_path, e));
    }

    let ck = Checkpoint {
        params: outcome.params,
        toggles: cfg.toggles,
        config_fingerprint: fingerprint,
    };
    save_checkpoint(&ck, &a.out).map_err(at(&a.out))?;
    let cfg_path = with_suffix(&a.out, ".cfg");
    fs::write(&cfg_path, &canonical).map_err(|e| io_failure(&cfg_path, e))?;
    println!("checkpoint\t{}\t{}", a.out.display(), ck.fingerprint());
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint).map_err(at(&a.checkpoint))?;
    let mut cfg = RunConfig {
        dims: ck.params.dims,
        toggles: ck.toggles,
        ..RunConfig::default()
    };
    apply_common(&mut cfg, &a.common, false)?;
    check_dims(&ck.params.dims, &cfg.dims)?;
    if cfg.eval_generate == 0 {
        cfg.toggles.vsgm = false;
    }
    cfg.validate()?;

    let ds = load_embeddings(&a.data).map_err(at(&a.data))?;
    let eval_cfg = cfg.eval_config();
    let mut report = par::with_threads(a.threads, || evaluate(&ck.params, &ds, &eval_cfg))??;
    report.set("checkpoint", &ck.fingerprint());
    report.set("run", &cfg.fingerprint());
    for line in cfg.canonical().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            report.set(&format!("cfg.{k}"), v);
        }
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    report.date = Some(format!(
        "unix {secs}, wall {:.1}s",
        report.wall_time.unwrap_or(0.0)
    ));
    report.write(&a.report).map_err(at(&a.report))?;
    println!("{:.4} ± {:.4}", report.mean, report.ci95);
    Ok(())
}

fn compare(a: CompareArgs) -> CmdResult {
    let ra = EvalReport::read(&a.a).map_err(at(&a.a))?;
    let rb = EvalReport::read(&a.b).map_err(at(&a.b))?;
    let stats = compare_paired(&ra, &rb)?;
    println!("{stats}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.dims == DimsPreset::Default {
        return Err(Failure {
            code: 2,
            message: "finite differences at default dims would take hours; use --dims toy".into(),
        });
    }
    let cfg = GradCheckConfig::default();
    let suites = run_all(&a.dims.dims(), a.seed, &cfg)?;
    println!("suite\tgroup\tentries\tremeasured\tmax_rel_err\tresult");
    let mut ok = true;
    for s in &suites {
        for g in &s.report.groups {
            ok &= g.passed;
            println!(
                "{}\t{}\t{}\t{}\t{:.3e}\t{}",
                s.suite,
                g.group,
                g.entries,
                g.rescaled,
                g.max_rel_err,
                if g.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("gradient check failed at rtol {}", cfg.rtol),
        })
    }
}

fn inspect(a: InspectArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint).map_err(at(&a.checkpoint))?;
    let p = &ck.params;
    println!("dims\t{:?}", p.dims);
    println!("toggles\t{}", ck.toggles);
    if p.dims.is_default() {
        println!("module\tparams\tbudget\tdeviation\tstatus");
        for b in budget_lines(p) {
            println!(
                "{}\t{}\t{}\t{:+.1}%\t{}",
                b.group,
                b.count,
                b.budget,
                100.0 * b.deviation(),
                if b.within() { "ok" } else { "OUTSIDE ±10%" }
            );
        }
    } else {
        println!("module\tparams");
        for (g, n) in p.group_counts() {
            println!("{g}\t{n}");
        }
        println!("total\t{}", p.param_count());
    }
    Ok(())
}
