use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stt_core::embed::SampleMode;
use stt_core::harness::ablate::{ablate, ablation_csv, Variant};
use stt_core::harness::data::save_dataset;
use stt_core::harness::gradsuite::run_suite;
use stt_core::harness::train::log_csv;
use stt_core::harness::{datasets, evaluate_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, train, Config};
use stt_core::loss::EvalReport;

#[derive(Parser)]
#[command(name = "stt", version, about = "Train and evaluate spatio-temporal transformers on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; missing keys take the desk defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test sets and write them to disk.
    GenData(Common),
    /// Train a model, writing a checkpoint after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train and score every attention variant under one budget.
    Ablate(Common),
    /// Finite-difference gradient checks of every op and the tiny model.
    GradCheck(Common),
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load(common: &Common) -> Result<Config> {
    let cfg = Config::load(&common.config)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(cfg: &Config, report: &EvalReport, extra: &str) -> Result<()> {
    write(&cfg.output.metrics, &format!("{extra}{}", report.key_values()))?;
    write(&cfg.output.confusion, &report.confusion_csv())?;
    write(&cfg.output.report, &report.to_text())?;
    eprint!("{}", report.to_text());
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let (train_set, test_set) = datasets(&cfg, common.seed)?;
    for (path, set) in [(&cfg.output.train_data, &train_set), (&cfg.output.test_data, &test_set)] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        save_dataset(path, set)?;
        eprintln!("wrote {} clips to {}", set.len(), path.display());
    }
    Ok(())
}

fn run_train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = load(common)?;
    let (train_set, test_set) = datasets(&cfg, common.seed)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    if let Some(c) = &resume {
        eprintln!("resuming after epoch {}", c.epoch);
    }
    let ckpt_path = cfg.output.checkpoint.clone();
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let mut records = Vec::new();
    let outcome = train(&cfg, common.seed, &train_set, Some(&test_set), resume, &mut |r, ck| {
        save_checkpoint(ck, &ckpt_path)?;
        match r.eval {
            Some((uar, war)) => eprintln!(
                "epoch {:>3}  lr {:.0e}  loss {:.4}  uar {uar:.4}  war {war:.4}  {:.1}s",
                r.epoch,
                r.lr,
                r.train_loss,
                start.elapsed().as_secs_f64()
            ),
            None => eprintln!(
                "epoch {:>3}  lr {:.0e}  loss {:.4}  {:.1}s",
                r.epoch,
                r.lr,
                r.train_loss,
                start.elapsed().as_secs_f64()
            ),
        }
        records.push(r.clone());
        Ok(())
    })?;
    write(&cfg.output.log, &log_csv(&records))?;
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    let plan = cfg.sampling_plan(SampleMode::Test)?;
    let report = evaluate_checkpoint(&outcome.checkpoint, &plan, &test_set)?;
    let extra = format!("epochs={}\nseed={}\n", outcome.checkpoint.epoch, common.seed);
    write_report(&cfg, &report, &extra)
}

fn run_eval(common: &Common, ckpt: &Path) -> Result<()> {
    let cfg = load(common)?;
    let ckpt = load_checkpoint_for(ckpt, &cfg.model_config()?)?;
    let (_, test_set) = datasets(&cfg, common.seed)?;
    let plan = cfg.sampling_plan(SampleMode::Test)?;
    let report = evaluate_checkpoint(&ckpt, &plan, &test_set)?;
    write_report(&cfg, &report, &format!("epochs={}\n", ckpt.epoch))
}

fn run_ablate(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let (train_set, test_set) = datasets(&cfg, common.seed)?;
    let start = Instant::now();
    let rows = ablate(&cfg, common.seed, &train_set, &test_set, &Variant::ALL, &mut |v, r| {
        eprintln!(
            "{:<13} epoch {:>3}  loss {:.4}  {:.1}s",
            v.name(),
            r.epoch,
            r.train_loss,
            start.elapsed().as_secs_f64()
        );
    })?;
    let csv = ablation_csv(&rows);
    eprint!("{csv}");
    write(&cfg.output.ablation, &csv)
}

fn run_grad_check(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let suite = run_suite(common.seed)?;
    for c in &suite.cases {
        eprintln!(
            "{:<32} {:>6} coords  max rel err {:.2e}  {}",
            c.name,
            c.report.coords_checked,
            c.report.max_rel_error,
            if c.report.passed() { "ok" } else { "FAIL" }
        );
    }
    eprintln!("{:.1}s", suite.elapsed.as_secs_f64());
    write(&cfg.output.gradcheck, &suite.to_csv())?;
    if !suite.passed() {
        bail!("gradient check failed: max rel err {:e}", suite.max_rel_error());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train { common, resume } => run_train(common, resume.as_deref()),
        Command::Eval { common, ckpt } => run_eval(common, ckpt),
        Command::Ablate(c) => run_ablate(c),
        Command::GradCheck(c) => run_grad_check(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
