use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hbfp::checkpoint::Checkpoint;
use hbfp::config::RunConfig;
use hbfp::data::Dataset;
use hbfp::gradsuite::{run_suite, write_report, SuiteConfig};
use hbfp::pipeline::{evaluate_model, load_or_generate, write_loss_log, Trainer};
use hbfp::Error;

pub const DATASET_FILE: &str = "dataset.hbfpds";
pub const CHECKPOINT_FILE: &str = "checkpoint.hbfpck";
pub const LOSS_LOG_FILE: &str = "loss_log.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const GRADCHECK_FILE: &str = "gradcheck.tsv";

#[derive(Parser)]
#[command(name = "hbfp", version, about = "Train and evaluate HBFP retrieval models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train a model; writes a checkpoint and the per-step loss log.
    Train(Common),
    /// Evaluate a checkpoint on the query/gallery split.
    Eval(Common),
    /// Check every gradient against central differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Plain-text `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated pooling thresholds.
    #[arg(long)]
    lambdas: Option<String>,
}

impl Common {
    fn run_config(&self) -> hbfp::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| with_path(e, p))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> hbfp::Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(l) = &self.lambdas {
            cfg.set("lambdas", l)?;
        }
        cfg.validate()?;
        hbfp::par::configure_threads(cfg.threads);
        Ok(())
    }
}

fn with_path(e: std::io::Error, path: &Path) -> std::io::Error {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

/// Exit status for each error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io(_) | Error::Format(_) => 2,
        Error::Contract(_) | Error::Shape(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn create(dir: &Path, name: &str) -> hbfp::Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn gen_data(args: &Common) -> hbfp::Result<()> {
    let cfg = args.run_config()?;
    let ds = Dataset::synthetic(&cfg.synthetic_spec(), cfg.seed)?;
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(DATASET_FILE);
    ds.save(&path)?;
    log::info!("wrote {} samples to {}", ds.samples.len(), path.display());
    Ok(())
}

fn train(args: &Common) -> hbfp::Result<()> {
    let cfg = args.run_config()?;
    let ds = load_or_generate(&cfg)?;
    let mut trainer = Trainer::new(&cfg, &ds)?;
    let total = cfg.total_steps();
    let mut records = Vec::with_capacity(total);
    for _ in 0..total {
        let rec = trainer.step()?;
        if rec.step % 20 == 0 || rec.step + 1 == total {
            log::info!("step {} loss {:.4}", rec.step, rec.loss.total);
        }
        records.push(rec);
    }
    let mut log_out = create(&cfg.out, LOSS_LOG_FILE)?;
    write_loss_log(&records, &mut log_out)?;
    log_out.flush()?;
    let path = cfg.out.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&cfg, &trainer.model).save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn eval(args: &Common) -> hbfp::Result<()> {
    let path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(e) => Error::Io(with_path(e, path)),
        e => e,
    })?;
    // The checkpoint's snapshot describes the model; --config may point the
    // evaluation at different data.
    let cfg = match &args.config {
        Some(_) => args.run_config()?,
        None => {
            let mut c = ck.config.clone();
            args.apply(&mut c)?;
            c
        }
    };
    let mut model_cfg = ck.config.model_config();
    if args.lambdas.is_some() {
        model_cfg.pooling.lambdas = cfg.lambdas.clone();
    }
    let model = hbfp::model::Model::from_params(model_cfg, ck.params)?;
    let ds = load_or_generate(&cfg)?;
    let report = evaluate_model(&model, &ds, &cfg.eval_ranks)?;
    let mut out = create(&cfg.out, METRICS_FILE)?;
    report.write_tsv(&mut out)?;
    out.flush()?;
    println!(
        "mAP {:.4} CMC@1 {:.4} ({} queries, {} skipped)",
        report.map,
        report.cmc_at(1).unwrap_or(f64::NAN),
        report.evaluated,
        report.skipped
    );
    Ok(())
}

fn gradcheck(args: &Common) -> hbfp::Result<()> {
    let cfg = args.run_config()?;
    let reports = run_suite(cfg.seed, &SuiteConfig::default())?;
    write_report(&reports, std::io::stdout().lock())?;
    let mut out = create(&cfg.out, GRADCHECK_FILE)?;
    write_report(&reports, &mut out)?;
    out.flush()?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
