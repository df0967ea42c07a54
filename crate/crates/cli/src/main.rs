mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualprop::checkpoint::{load_checkpoint, save_checkpoint};
use dualprop::data::{load_mnist, make_toy, split_train_val, Dataset};
use dualprop::dyadic::{infer, DyadState, Schedule, TargetSignal};
use dualprop::network::NetworkSpec;
use dualprop::reference::{bp_gradients, compare_gradients, finite_difference_grad, GradReport};
use dualprop::rng::RngStream;
use dualprop::trainer::{evaluate, train_with, Algorithm, EpochRow, ScheduleKind};

use crate::config::{DatasetSource, RunConfig};

/// Dual propagation training engine.
#[derive(Parser)]
#[command(name = "dualprop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics.csv plus best/final checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Log per-layer angles between DP and BP gradients (runs BP on every batch).
        #[arg(long)]
        log_angles: bool,
    },
    /// Evaluate a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (default: <out>/best.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare DP, BP and finite-difference gradients on one batch.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Per-batch DP/BP gradient angles for a checkpoint (or a fresh network).
    AngleReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of training batches to analyse.
        #[arg(long, default_value_t = 10)]
        batches: usize,
    },
    /// Train once per nudging strength and write beta_sweep.csv.
    BetaSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated beta values.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 10.0, 100.0])]
        betas: Vec<f64>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn load_data(cfg: &RunConfig) -> Result<Splits> {
    let (full, test) = match &cfg.dataset {
        DatasetSource::Mnist { dir, subset } => {
            let (train, test) = load_mnist(dir).with_context(|| format!("loading MNIST from {}", dir.display()))?;
            let train = if *subset > 0 { train.take(*subset) } else { train };
            (train, test)
        }
        DatasetSource::Toy { kind, samples } => (
            make_toy(*kind, *samples, cfg.seed)?,
            make_toy(*kind, *samples, cfg.seed.wrapping_add(0x9e37_79b9))?,
        ),
    };
    let full = full.with_sample_shape(&cfg.input_shape)?;
    let test = test.with_sample_shape(&cfg.input_shape)?;
    let (train, val) = split_train_val(&full, cfg.val_fraction, cfg.seed)?;
    Ok(Splits { train, val, test })
}

/// Fresh network plus the stream that drives training, all derived from the seed.
fn build_network(cfg: &RunConfig) -> Result<(NetworkSpec, RngStream)> {
    let mut root = RngStream::new(cfg.seed);
    let mut init = root.fork();
    let mut feedback = root.fork();
    let train_rng = root.fork();
    let mut net = NetworkSpec::new(&cfg.input_shape, cfg.layers.clone(), &mut init)?;
    if cfg.kolen_pollack {
        net = net.with_random_feedback(&mut feedback);
    }
    Ok((net, train_rng))
}

fn csv_header(depth: usize, angles: bool, kp: bool) -> String {
    let mut cols: Vec<String> = [
        "epoch",
        "train_loss",
        "train_acc",
        "val_loss",
        "val_acc",
        "lr",
        "wall_time_s",
    ]
    .iter()
    .map(ToString::to_string)
    .collect();
    if angles {
        cols.push("mean_grad_angle".into());
        cols.extend((1..=depth).map(|k| format!("angle_layer_{k}")));
    }
    if kp {
        cols.push("feedback_misalignment".into());
    }
    cols.push("seed".into());
    cols.join(",")
}

fn csv_row(row: &EpochRow, seed: u64) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut cols = vec![
        row.epoch.to_string(),
        row.train_loss.to_string(),
        row.train_acc.to_string(),
        opt(row.val_loss),
        opt(row.val_acc),
        row.lr.to_string(),
        format!("{:.3}", row.wall_time_s),
    ];
    if let Some(a) = &row.mean_grad_angle {
        cols.push((a.iter().sum::<f64>() / a.len() as f64).to_string());
        cols.extend(a.iter().map(f64::to_string));
    }
    if let Some(m) = row.feedback_misalignment {
        cols.push(m.to_string());
    }
    cols.push(seed.to_string());
    cols.join(",")
}

struct RunSummary {
    test_acc: f64,
    best_val_acc: Option<f64>,
}

fn run_training(cfg: &RunConfig, data: &Splits) -> Result<RunSummary> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("config.resolved"), cfg.to_text())?;
    let (net, mut rng) = build_network(cfg)?;
    let angles = cfg.train.log_angles && matches!(cfg.train.algorithm, Algorithm::DualProp { .. });
    let mut metrics = fs::File::create(cfg.out.join("metrics.csv"))?;
    writeln!(metrics, "{}", csv_header(net.depth(), angles, net.is_asymmetric()))?;
    println!(
        "training {} parameters on {} samples ({} validation)",
        net.num_parameters(),
        data.train.len(),
        data.val.len()
    );
    let best_path = cfg.out.join("best.ckpt");
    let mut best_val = f64::NEG_INFINITY;
    let outcome = train_with(net, &data.train, Some(&data.val), &cfg.train, &mut rng, |row, net| {
        writeln!(metrics, "{}", csv_row(row, cfg.seed))?;
        metrics.flush()?;
        let val = row.val_acc.unwrap_or(f64::NEG_INFINITY);
        if val > best_val {
            best_val = val;
            save_checkpoint(net, &best_path)?;
        }
        println!(
            "epoch {:>3}  train loss {:.5}  train acc {:6.2}%  val acc {:6.2}%  ({:.1}s)",
            row.epoch, row.train_loss, row.train_acc, val, row.wall_time_s
        );
        Ok(())
    })?;
    save_checkpoint(&outcome.net, cfg.out.join("final.ckpt"))?;
    if outcome.report.rows.is_empty() {
        save_checkpoint(&outcome.best, &best_path)?;
    }
    let (test_loss, test_acc) = evaluate(&outcome.best, &data.test, cfg.train.loss)?;
    println!(
        "best epoch {}: test loss {test_loss:.5}, test accuracy {test_acc:.2}%",
        outcome.report.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    Ok(RunSummary {
        test_acc,
        best_val_acc: outcome
            .report
            .best_epoch
            .and_then(|e| outcome.report.rows[e - 1].val_acc),
    })
}

fn cmd_train(common: &Common, log_angles: bool) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    cfg.train.log_angles |= log_angles;
    let data = load_data(&cfg)?;
    run_training(&cfg, &data)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(common: &Common, checkpoint: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let path = checkpoint.map_or_else(|| cfg.out.join("best.ckpt"), Path::to_path_buf);
    let net = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let data = load_data(&cfg)?;
    let (loss, acc) = evaluate(&net, &data.test, cfg.train.loss)?;
    println!("{}: test loss {loss:.5}, test accuracy {acc:.2}%", path.display());
    Ok(ExitCode::SUCCESS)
}

/// DP gradients from one inference call starting at rest.
fn dp_gradients(
    cfg: &RunConfig,
    net: &NetworkSpec,
    x: &dualprop::tensor::Tensor,
    target: &TargetSignal,
    rng: &mut RngStream,
) -> Result<Vec<dualprop::network::LayerGrad>> {
    let (nudge, kind) = match &cfg.train.algorithm {
        Algorithm::DualProp { schedule, .. } => (cfg.train.nudge(net.depth())?.expect("dp"), *schedule),
        Algorithm::Backprop => bail!("gradient comparisons need algorithm = dp"),
    };
    let mut schedule = match kind {
        ScheduleKind::Random { t_max } => Schedule::Random { t_max, rng: rng.fork() },
        ScheduleKind::Parallel => Schedule::Parallel,
        _ => Schedule::Regular,
    };
    let mut state = DyadState::zeros(net, x)?;
    Ok(infer(net, &nudge, &mut state, target, &mut schedule)?.grads.remove(0))
}

fn print_report(label: &str, rep: &GradReport) {
    println!("{label}");
    println!("  layer  angle_deg      cosine         rel_l2_error");
    for (k, c) in rep.layers.iter().enumerate() {
        println!(
            "  {:>5}  {:<13.6e}  {:<13.10}  {:.3e}{}",
            k + 1,
            c.angle_degrees,
            c.cosine_similarity,
            c.rel_l2_error,
            if c.degenerate { "  (one gradient is zero)" } else { "" }
        );
    }
}

const FD_PARAMETER_LIMIT: usize = 20_000;
const FD_TOLERANCE: f64 = 1e-6;

fn cmd_grad_check(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let data = load_data(&cfg)?;
    let (net, mut rng) = build_network(&cfg)?;
    let idx: Vec<usize> = (0..cfg.check_batch.min(data.train.len())).collect();
    let (x, _, y) = data.train.batch(&idx);
    let target = TargetSignal::Target(y);
    let dp = dp_gradients(&cfg, &net, &x, &target, &mut rng)?;
    let (bp, _) = bp_gradients(&net, &x, &target, cfg.train.loss)?;
    let rep = compare_gradients(&dp, &bp)?;
    print_report("dual propagation vs back-propagation", &rep);
    let mut ok = true;
    let max_angle = rep.max_angle();
    if max_angle > cfg.max_angle {
        println!(
            "FAIL: largest layer angle {max_angle:.4}° exceeds max_angle = {}",
            cfg.max_angle
        );
        ok = false;
    }
    if net.num_parameters() <= FD_PARAMETER_LIMIT {
        let fd = finite_difference_grad(&net, &x, &target, cfg.train.loss, 1e-5)?;
        let mut worst: f64 = 0.0;
        for (b, f) in bp.iter().zip(&fd.grads) {
            let pairs: Vec<(f64, f64)> = b
                .weight
                .data()
                .iter()
                .zip(f.weight.data())
                .filter(|(_, f)| !f.is_nan())
                .map(|(a, b)| (*a, *b))
                .collect();
            let diff = pairs.iter().map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let norm = pairs.iter().map(|(_, b)| b * b).sum::<f64>().sqrt();
            worst = worst.max(if norm > 0.0 { diff / norm } else { diff });
        }
        println!(
            "back-propagation vs finite differences: worst layer relative error {worst:.3e} ({} kink-crossing entries skipped)",
            fd.skipped
        );
        if worst > FD_TOLERANCE {
            println!("FAIL: finite-difference disagreement above {FD_TOLERANCE:e}");
            ok = false;
        }
    } else {
        println!(
            "finite-difference check skipped ({} parameters > {FD_PARAMETER_LIMIT})",
            net.num_parameters()
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_angle_report(common: &Common, checkpoint: Option<&Path>, batches: usize) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let data = load_data(&cfg)?;
    let (fresh, mut rng) = build_network(&cfg)?;
    let net = match checkpoint {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => fresh,
    };
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("angle_report.csv");
    let mut out = fs::File::create(&path)?;
    writeln!(
        out,
        "batch,{}",
        (1..=net.depth())
            .map(|k| format!("angle_layer_{k}"))
            .collect::<Vec<_>>()
            .join(",")
    )?;
    let mut sums = vec![0.0; net.depth()];
    let all = dualprop::data::batch_indices(data.train.len(), cfg.train.batch_size, None, false);
    let n = batches.min(all.len());
    for (b, idx) in all.iter().take(n).enumerate() {
        let (x, _, y) = data.train.batch(idx);
        let target = TargetSignal::Target(y);
        let dp = dp_gradients(&cfg, &net, &x, &target, &mut rng)?;
        let (bp, _) = bp_gradients(&net, &x, &target, cfg.train.loss)?;
        let rep = compare_gradients(&dp, &bp)?;
        let angles: Vec<f64> = rep.layers.iter().map(|c| c.angle_degrees).collect();
        for (s, a) in sums.iter_mut().zip(&angles) {
            *s += a;
        }
        writeln!(
            out,
            "{},{}",
            b + 1,
            angles.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        )?;
    }
    for (k, s) in sums.iter().enumerate() {
        println!(
            "layer {}: mean angle {:.3}° over {n} batches",
            k + 1,
            s / n.max(1) as f64
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_beta_sweep(common: &Common, betas: &[f64]) -> Result<ExitCode> {
    let base = load_config(common)?;
    if betas.is_empty() {
        bail!("--betas needs at least one value");
    }
    let configs = betas
        .iter()
        .map(|&b| {
            let mut c = base.with_beta(b)?;
            c.out = base.out.join(format!("beta_{b}"));
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let data = load_data(&base)?;
    fs::create_dir_all(&base.out)?;
    let path = base.out.join("beta_sweep.csv");
    let mut csv = fs::File::create(&path)?;
    writeln!(csv, "beta,test_acc,best_val_acc")?;
    for (beta, cfg) in betas.iter().zip(&configs) {
        println!("== beta = {beta}");
        let s = run_training(cfg, &data)?;
        writeln!(
            csv,
            "{beta},{},{}",
            s.test_acc,
            s.best_val_acc.map(|v| v.to_string()).unwrap_or_default()
        )?;
        csv.flush()?;
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, log_angles } => cmd_train(common, *log_angles),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref()),
        Command::GradCheck { common } => cmd_grad_check(common),
        Command::AngleReport {
            common,
            checkpoint,
            batches,
        } => cmd_angle_report(common, checkpoint.as_deref(), *batches),
        Command::BetaSweep { common, betas } => cmd_beta_sweep(common, betas),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
