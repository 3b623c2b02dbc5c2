//! `mixskd` — train, check and analyse MixSKD models from the command line.
//!
//! Exit codes: 0 success, 1 check/metric failure or runtime error,
//! 2 usage error (bad flags, unreadable or invalid config).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use mixskd::autodiff::GradcheckOptions;
use mixskd::config::RunConfig;
use mixskd::data::Dataset;
use mixskd::evaluator::{
    default_lambda_grid, fgsm_attack, logprob_histogram, misclassified_indices, miss_rate_curve, top1_accuracy,
    DEFAULT_EPSILONS, DEFAULT_HIST_MIN, DEFAULT_PAIRS,
};
use mixskd::losses::{gradcheck_objective, LossOptions};
use mixskd::mixup::make_mix_batch;
use mixskd::network::{
    load_checkpoint, save_checkpoint, save_inference_checkpoint, InferenceNet, Network,
};
use mixskd::trainer::{fit, Record};
use mixskd::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mixskd", version, about = "Mixup-based self-knowledge distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (flat `key = value` file).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (created if absent).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint (full or pruned) to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes metrics.jsonl, epochs.jsonl, checkpoints and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Top-1 accuracy of the pruned network.
    Eval {
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Finite-difference check of every loss term on a small 64-bit network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        rel_tol: f64,
        /// Coordinates checked per parameter tensor (0 = all).
        #[arg(long, default_value_t = 4)]
        coords: usize,
        /// Offset the analytic gradient of this term (self-test of the checker).
        #[arg(long, hide = true)]
        fault_term: Option<String>,
    },
    /// FGSM accuracy over an ε grid.
    Attack {
        #[command(flatten)]
        args: EvalArgs,
        /// Comma-separated ε values.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
    },
    /// Miss rate of Mixup-image predictions over a λ grid.
    Missrate {
        #[command(flatten)]
        args: EvalArgs,
        /// Comma-separated λ values in [0, 1].
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = DEFAULT_PAIRS)]
        pairs: usize,
    },
    /// Log-probability histograms over misclassified samples.
    Hist {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_HIST_MIN, allow_negative_numbers = true)]
        min: f64,
        /// Restrict to samples also misclassified by this checkpoint.
        #[arg(long)]
        intersect: Option<PathBuf>,
    },
    /// Write the configured datasets as tensor files.
    Export {
        #[command(flatten)]
        common: Common,
    },
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure { code: 1, err }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::InvalidConfig(_)) { 2 } else { 1 };
        Failure { code, err: e.into() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("MIXSKD_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: MIXSKD_THREADS must be a positive integer, got '{n}'");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> CliResult<u8> {
    match cmd {
        Command::Train { common } => run_train(&common),
        Command::Eval { args } => run_eval(&args),
        Command::Gradcheck {
            common,
            eps,
            rel_tol,
            coords,
            fault_term,
        } => run_gradcheck(&common, eps, rel_tol, coords, fault_term.as_deref()),
        Command::Attack { args, epsilons } => run_attack(&args, epsilons),
        Command::Missrate { args, grid, pairs } => run_missrate(&args, grid, pairs),
        Command::Hist {
            args,
            bins,
            min,
            intersect,
        } => run_hist(&args, bins, min, intersect.as_deref()),
        Command::Export { common } => run_export(&common),
    }
}

/// Resolved config plus the prepared output directory; writes the echo.
fn setup(common: &Common) -> CliResult<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(anyhow!("config file {} not found", path.display())));
            }
            RunConfig::load(path, &overrides).map_err(|e| match e {
                Error::Io { .. } => usage(e),
                other => other.into(),
            })?
        }
        None => RunConfig::parse("", &overrides)?,
    };
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write(&common.out.join("effective.cfg"), &cfg.echo())?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> CliResult<()> {
    write(path, &(serde_json::to_string_pretty(v).expect("json") + "\n"))
}

fn run_train(common: &Common) -> CliResult<u8> {
    let cfg = setup(common)?;
    let out = &common.out;
    let (train, test) = cfg.load_datasets()?;
    let mut net = Network::<f32>::build(cfg.net.clone(), cfg.train.seed)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).context("creating checkpoint directory")?;
    let mut metrics = fs::File::create(out.join("metrics.jsonl")).context("creating metrics.jsonl")?;
    let mut epochs = fs::File::create(out.join("epochs.jsonl")).context("creating epochs.jsonl")?;
    let io = |e: std::io::Error, p: &Path| Error::Io {
        path: p.to_path_buf(),
        source: e,
    };
    let result = fit(&mut net, &train, test.as_ref(), &cfg.train, |rec| match rec {
        Record::Step(v) => writeln!(metrics, "{v}").map_err(|e| io(e, &out.join("metrics.jsonl"))),
        Record::Epoch { value, net } => {
            writeln!(epochs, "{value}").map_err(|e| io(e, &out.join("epochs.jsonl")))?;
            let epoch = value["epoch"].as_u64().unwrap_or(0);
            save_checkpoint(&ckpt_dir.join(format!("epoch{epoch:03}.ckpt")), net)
        }
    });
    let summary = match result {
        Ok(s) => s,
        Err(Error::Evaluation(m)) => {
            write_json(&out.join("summary.json"), &json!({"method": cfg.train.method(), "aborted": m}))?;
            return Err(anyhow!("training aborted: {m}").into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&out.join("final.ckpt"), &net)?;
    let pruned = net.prune_for_inference();
    save_inference_checkpoint(&out.join("model.ckpt"), &pruned)?;
    let v = json!({
        "method": summary.method,
        "epochs": summary.epochs,
        "steps": summary.steps,
        "final_train_accuracy": summary.final_train_accuracy,
        "final_test_accuracy": summary.final_test_accuracy,
        "final_mean_total": summary.final_loss,
        "params_full": net.param_count(),
        "params_pruned": pruned.param_count(),
        "config": mixskd::config::to_json(&cfg),
    });
    write_json(&out.join("summary.json"), &v)?;
    println!("{}", serde_json::to_string(&v).expect("json"));
    Ok(0)
}

/// Pruned network and evaluation dataset, checked against each other.
fn load_eval(args: &EvalArgs) -> CliResult<(RunConfig, InferenceNet<f32>, Dataset)> {
    let mut cfg = setup(&args.common)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if args.common.config.is_none() {
        // Without a config, generate data matching the checkpoint.
        cfg.net = ckpt.config().clone();
    }
    let net = ckpt.into_inference();
    let (train, test) = cfg.load_datasets()?;
    let ds = match args.split {
        SplitArg::Train => train,
        SplitArg::Test => test.ok_or_else(|| usage(anyhow!("no test split configured (data.test_path)")))?,
    };
    let (c, h, w) = ds.image_shape();
    let nc = &net.config;
    if ds.num_classes != nc.num_classes || (c, h, w) != (nc.in_channels, nc.input_height, nc.input_width) {
        return Err(Error::Format(format!(
            "checkpoint expects {} classes of {}x{}x{} images, dataset has {} classes of {c}x{h}x{w}",
            nc.num_classes, nc.in_channels, nc.input_height, nc.input_width, ds.num_classes
        ))
        .into());
    }
    Ok((cfg, net, ds))
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
    }
}

fn run_eval(args: &EvalArgs) -> CliResult<u8> {
    let (_, net, ds) = load_eval(args)?;
    let acc = top1_accuracy(&net, &ds)?;
    let v = json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "split": split_name(args.split),
        "samples": ds.len(),
        "accuracy": acc,
        "params_pruned": net.param_count(),
    });
    write_json(&args.common.out.join("eval.json"), &v)?;
    println!("{}", serde_json::to_string(&v).expect("json"));
    Ok(0)
}

fn run_attack(args: &EvalArgs, epsilons: Option<Vec<f64>>) -> CliResult<u8> {
    let (_, net, ds) = load_eval(args)?;
    let eps = epsilons.unwrap_or_else(|| DEFAULT_EPSILONS.to_vec());
    let r = fgsm_attack(&net, &ds, &eps)?;
    write(&args.common.out.join("attack.csv"), &r.to_csv())?;
    let v = serde_json::to_value(&r).expect("json");
    write_json(&args.common.out.join("attack.json"), &v)?;
    println!("{}", serde_json::to_string(&v).expect("json"));
    Ok(0)
}

fn run_missrate(args: &EvalArgs, grid: Option<Vec<f64>>, pairs: usize) -> CliResult<u8> {
    let (cfg, net, ds) = load_eval(args)?;
    let grid = grid.unwrap_or_else(default_lambda_grid);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let curve = miss_rate_curve(&net, &ds, &grid, pairs, &mut rng)?;
    write(&args.common.out.join("missrate.csv"), &curve.to_csv())?;
    let v = serde_json::to_value(&curve).expect("json");
    write_json(&args.common.out.join("missrate.json"), &v)?;
    println!("{}", serde_json::to_string(&v).expect("json"));
    Ok(0)
}

fn run_hist(args: &EvalArgs, bins: usize, min: f64, intersect: Option<&Path>) -> CliResult<u8> {
    let (_, net, ds) = load_eval(args)?;
    let subset = match intersect {
        Some(p) => {
            let other = load_checkpoint(p)?.into_inference();
            let theirs = misclassified_indices(&other, &ds)?;
            let ours = misclassified_indices(&net, &ds)?;
            Some(ours.into_iter().filter(|i| theirs.binary_search(i).is_ok()).collect::<Vec<_>>())
        }
        None => None,
    };
    let h = logprob_histogram(&net, &ds, bins, min, subset.as_deref())?;
    write(&args.common.out.join("hist.csv"), &h.to_csv())?;
    let mut v = serde_json::to_value(&h).expect("json");
    v["mode"] = json!(if intersect.is_some() { "intersection" } else { "single" });
    write_json(&args.common.out.join("hist.json"), &v)?;
    println!("{}", serde_json::to_string(&v).expect("json"));
    Ok(0)
}

fn run_gradcheck(common: &Common, eps: f64, rel_tol: f64, coords: usize, fault: Option<&str>) -> CliResult<u8> {
    let mut toy = common.clone();
    // The oracle runs on a small two-stage network unless the config says otherwise.
    if toy.config.is_none() {
        toy.overrides.splice(
            0..0,
            [
                "net.stages=3x1, 4x1/2",
                "net.input_height=6",
                "net.input_width=6",
                "net.num_classes=3",
                "net.disc_hidden=4",
            ]
            .map(String::from),
        );
    }
    let cfg = setup(&toy)?;
    let mut net = Network::<f64>::build(cfg.net.clone(), cfg.train.seed)?;
    net.jitter_biases(0.1, cfg.train.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let n = 2;
    let nc = &cfg.net;
    let xi = mixskd::autodiff::Tensor::<f64>::from_fn(&[n, nc.in_channels, nc.input_height, nc.input_width], |_| {
        rng.random_range(0.0..1.0)
    });
    let yi: Vec<usize> = (0..n).map(|_| rng.random_range(0..nc.num_classes)).collect();
    let perm = vec![1, 0];
    let xj = xi.select_rows(&perm)?;
    let yj = perm.iter().map(|&p| yi[p]).collect();
    let lambda = rng.random_range(0.05..0.95);
    let mut mix = make_mix_batch(xi, xj, yi, yj, lambda, nc.num_classes)?;
    mix.perm = Some(perm);
    let opts = LossOptions {
        weights: cfg.train.weights,
        t2_scaling: cfg.train.t2_scaling,
        teacher_feature_grad: cfg.train.teacher_feature_grad,
        ..Default::default()
    };
    let check = GradcheckOptions {
        eps,
        rel_tol,
        max_coords: (coords > 0).then_some(coords),
        fault_offset: 0.0,
    };
    let rows = gradcheck_objective(&net, &mix, &opts, &check, fault)?;
    let mut csv = String::from("term,max_rel_error,checked,passed\n");
    println!("{:<10} {:>14} {:>8}  result", "term", "max_rel_error", "checked");
    for r in &rows {
        let status = if r.report.passed { "pass" } else { "FAIL" };
        println!("{:<10} {:>14.3e} {:>8}  {status}", r.term, r.report.max_rel_error, r.report.checked);
        csv.push_str(&format!("{},{},{},{}\n", r.term, r.report.max_rel_error, r.report.checked, r.report.passed));
    }
    write(&common.out.join("gradcheck.csv"), &csv)?;
    let failed: Vec<_> = rows.iter().filter(|r| !r.report.passed).map(|r| r.term).collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(1)
    }
}

fn run_export(common: &Common) -> CliResult<u8> {
    let cfg = setup(common)?;
    let (train, test) = cfg.load_datasets()?;
    train.export(&common.out.join("train"))?;
    if let Some(t) = &test {
        t.export(&common.out.join("test"))?;
    }
    let v = json!({
        "train": {"samples": train.len()},
        "test": test.as_ref().map(|t| json!({"samples": t.len()})),
        "classes": train.num_classes,
    });
    write_json(&common.out.join("export.json"), &v)?;
    println!("{}", serde_json::to_string(&v).expect("json"));
    Ok(0)
}
