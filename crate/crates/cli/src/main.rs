//! `advsdf`: synthetic data, training, evaluation and attribution runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advsdf_core::advtrain::{load_checkpoint, save_checkpoint, write_log, Checkpoint};
use advsdf_core::attrib::{sensitivity, shapley_importance, write_sensitivity, write_shapley};
use advsdf_core::evalkit::{evaluate_model, write_evaluation};
use advsdf_core::pipeline::{data_digest, fit, prepare};
use advsdf_core::synthlab::{generate, oracle_metrics, read_oracle, write_dataset, write_oracle};
use advsdf_core::{Dataset, Error, Result, RunConfig, SplitName, SplitSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "advsdf", version, about = "Adversarial SDF estimation on multi-modal asset panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted pricing kernel.
    Synth(SynthArgs),
    /// Train the SDF and instrument networks.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or oracle weights) on one split.
    Eval(EvalArgs),
    /// Feature attribution of a checkpoint's SDF weights.
    Attrib(AttribArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Replace the configured seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write oracle.csv with the planted weights, betas and expected returns.
    #[arg(long)]
    with_oracle: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SplitArgs {
    /// Which split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// File with train/val/test start and end keys replacing the configured split.
    #[arg(long)]
    split_file: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the weights in this oracle file instead of a checkpoint.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Evaluation and split settings; the model always uses the checkpoint's config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sensitivity,
    Shapley,
}

#[derive(Args)]
struct AttribArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    common: Common,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(c: &Common) -> Result<()> {
    let dir = &c.out;
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        if entries.next().is_some() && !c.force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.common.seed_override)?;
    cfg.synth.check_features(&cfg.features)?;
    prepare_out(&a.common)?;
    let data = generate(&cfg.synth, cfg.seed)?;
    write_dataset(&data, &a.common.out)?;
    if a.with_oracle {
        write_oracle(&data.oracle, &a.common.out.join("oracle.csv"))?;
    }
    log::info!("wrote synthetic dataset to {}", a.common.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.common.seed_override)?;
    let digest = data_digest(&a.data)?;
    let ds = Dataset::load(&a.data)?;
    prepare_out(&a.common)?;
    let p = prepare(&ds, &cfg)?;
    let outcome = match fit(&p, &cfg, &digest) {
        Ok(o) => o,
        Err(Error::Diverged {
            iteration,
            reason,
            last_good,
        }) => {
            let path = a.common.out.join("checkpoint.bin");
            save_checkpoint(&last_good, &path)?;
            log::error!("saved the last good checkpoint (iteration {}) to {}", last_good.iteration, path.display());
            return Err(Error::Diverged {
                iteration,
                reason,
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    save_checkpoint(&outcome.best, &a.common.out.join("checkpoint.bin"))?;
    write_log(&a.common.out.join("train_log.csv"), &outcome.log, &cfg.digest())?;
    let v0 = outcome.log[0].val_loss;
    println!(
        "best validation loss {:.6e} at iteration {} ({:.4} of initial); {} iterations{}",
        outcome.best.val_loss,
        outcome.best.iteration,
        outcome.best.val_loss / v0,
        outcome.iterations_run,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

/// Applies `--config` eval/split keys and `--split-file` to the run config.
fn eval_config(base: &RunConfig, config: Option<&Path>, split: &SplitArgs) -> Result<(RunConfig, SplitName)> {
    let mut cfg = base.clone();
    if let Some(p) = config {
        let other = RunConfig::load(p)?;
        cfg.eval = other.eval;
        cfg.attrib = other.attrib;
        cfg.split = other.split;
    }
    if let Some(p) = &split.split_file {
        let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        cfg.split = SplitSpec::parse(&text, &p.display().to_string())?;
    }
    Ok((cfg, split.split.parse()?))
}

fn checked_checkpoint(path: &Path, data: &Path, force: bool) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let digest = data_digest(data)?;
    if digest != ck.data_digest {
        if !force {
            return Err(Error::DigestMismatch {
                what: "data",
                expected: ck.data_digest.clone(),
                found: digest,
            });
        }
        log::warn!("data digest differs from the checkpoint's; continuing because of --force");
    }
    Ok(ck)
}

fn print_report(ev: &advsdf_core::evalkit::Evaluation) {
    print!("{}", advsdf_core::evalkit::report_text(&ev.report));
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    if let Some(oracle_path) = &a.oracle {
        let base = load_config(a.config.as_deref(), a.common.seed_override)?;
        let (cfg, which) = eval_config(&base, None, &a.split)?;
        let oracle = read_oracle(oracle_path)?;
        prepare_out(&a.common)?;
        let ev = oracle_metrics(&oracle, &ds.panel, cfg.split.range(which), &cfg.eval, &cfg.digest())?;
        write_evaluation(&ev, &a.common.out)?;
        print_report(&ev);
        return Ok(());
    }
    let ck_path = a.checkpoint.as_deref().expect("clap requires --checkpoint without --oracle");
    let ck = checked_checkpoint(ck_path, &a.data, a.common.force)?;
    let (cfg, which) = eval_config(&ck.config, a.config.as_deref(), &a.split)?;
    prepare_out(&a.common)?;
    let p = prepare(&ds, &cfg)?;
    let ev = evaluate_model(&ck.model, &p.prep, cfg.split.range(which), &cfg.eval, &ck.config_digest())?;
    write_evaluation(&ev, &a.common.out)?;
    print_report(&ev);
    Ok(())
}

fn attrib(a: AttribArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let ck = checked_checkpoint(&a.checkpoint, &a.data, a.common.force)?;
    let (cfg, which) = eval_config(&ck.config, a.config.as_deref(), &a.split)?;
    let seed = a.common.seed_override.unwrap_or(cfg.seed);
    prepare_out(&a.common)?;
    let p = prepare(&ds, &cfg)?;
    let blocks = p.blocks(which).to_vec();
    if blocks.is_empty() {
        return Err(Error::data("panel", None, "the selected split holds no usable period"));
    }
    let digest = ck.config_digest();
    match a.mode {
        Mode::Sensitivity => {
            let r = sensitivity(&ck.model, &p.prep, &blocks)?;
            write_sensitivity(&r, &a.common.out.join("sensitivity.csv"), seed, &digest)?;
            for (n, v) in r.names.iter().zip(&r.values) {
                println!("{n}\t{v:.6e}");
            }
        }
        Mode::Shapley => {
            let r = shapley_importance(&ck.model, &p.prep, &blocks, &cfg.attrib, seed)?;
            write_shapley(&r, &a.common.out.join("shapley.csv"), &digest)?;
            println!("{} buckets, {} groups", r.buckets.len(), r.groups.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Attrib(a) => attrib(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
