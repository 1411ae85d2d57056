use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mast_core::config::RunConfig;
use mast_core::dataio::{ingest_dir, Database};
use mast_core::eval::{render_confusion, EvalReport};
use mast_core::pipeline;
use mast_core::synth::{write_dataset, SynthSpec};
use mast_core::Error;

const VERSION: &str = env!("MAST_GIT_DESCRIBE");

#[derive(Parser)]
#[command(name = "mast", version, about = "Masked multi-path autoencoder for HD-sEMG gesture recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert CSV exports into the canonical on-disk layout.
    Ingest {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
    },
    /// Stage 1: masked pretraining of the time path.
    Pretrain1(RunArgs),
    /// Stage 2: three-path pretraining with contrastive alignment.
    Pretrain2(RunArgs),
    /// Stage 3: supervised fine-tuning.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Train only the classifier head.
        #[arg(long)]
        freeze_encoder: bool,
        /// Start from random weights instead of the Stage 2 checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Evaluate the Stage 3 checkpoint under the configured protocol.
    Evaluate(RunArgs),
    /// Re-render confusion.png from report.json.
    Plot(RunArgs),
    /// Generate the deterministic synthetic 8-gesture dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Windows per subject and session.
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        subjects: u32,
        #[arg(long, default_value_t = 1)]
        sessions: u32,
        #[arg(long, default_value = "dba")]
        db: String,
        /// White-noise standard deviation in millivolts.
        #[arg(long, default_value_t = mast_core::synth::NOISE_MV)]
        noise: f64,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set stage1.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (checkpoints, metrics, reports).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root (defaults to data.root, then $MAST_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue this stage from its own checkpoint if present.
    #[arg(long)]
    resume: bool,
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

impl RunArgs {
    fn config(&self, extra: &[String]) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("out={}", toml_string(o)));
        }
        if let Some(d) = &self.data {
            overrides.push(format!("data.root={}", toml_string(d)));
        }
        overrides.extend_from_slice(extra);
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

fn write_run_json(out: &Path, command: &str, config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let record = json!({
        "command": command,
        "version": VERSION,
        "package_version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    let p = out.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(&record)? + "\n").with_context(|| format!("writing {}", p.display()))
}

fn train(run: &RunArgs, stage: u8, extra: &[String]) -> Result<()> {
    let cfg = run.config(extra)?;
    write_run_json(&cfg.out, &format!("stage{stage}"), serde_json::to_value(&cfg)?)?;
    let ck = pipeline::train(&cfg, stage, run.resume)?;
    if let Some(m) = ck.header.history.last() {
        println!("stage {stage} done: epoch {} loss {:.5}", m.epoch, m.loss);
    }
    Ok(())
}

fn evaluate(run: &RunArgs) -> Result<()> {
    let cfg = run.config(&[])?;
    write_run_json(&cfg.out, "evaluate", serde_json::to_value(&cfg)?)?;
    let report = pipeline::evaluate(&cfg)?;
    println!(
        "{}: frame accuracy {:.4} ± {:.4}, majority-vote accuracy {:.4} ± {:.4}",
        report.protocol,
        report.frame_accuracy.mean,
        report.frame_accuracy.std,
        report.vote_accuracy.mean,
        report.vote_accuracy.std
    );
    Ok(())
}

fn plot(run: &RunArgs) -> Result<()> {
    let cfg = run.config(&[])?;
    let p = cfg.out.join("report.json");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    render_confusion(&cfg.out.join("confusion.png"), &report.confusion)?;
    write_run_json(&cfg.out, "plot", serde_json::to_value(&cfg)?)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { src, dst } => {
            let n = ingest_dir(&src, &dst)?;
            write_run_json(&dst, "ingest", json!({ "src": src, "dst": dst }))?;
            println!("ingested {n} trials into {}", dst.display());
            Ok(())
        }
        Command::Pretrain1(run) => train(&run, 1, &[]),
        Command::Pretrain2(run) => train(&run, 2, &[]),
        Command::Finetune {
            run,
            freeze_encoder,
            from_scratch,
        } => {
            let mut extra = Vec::new();
            if freeze_encoder {
                extra.push("stage3.freeze_encoder=true".to_string());
            }
            if from_scratch {
                extra.push("stage3.from_scratch=true".to_string());
            }
            train(&run, 3, &extra)
        }
        Command::Evaluate(run) => evaluate(&run),
        Command::Plot(run) => plot(&run),
        Command::Synth {
            out,
            n,
            seed,
            subjects,
            sessions,
            db,
            noise,
        } => {
            let db = Database::parse(&db).ok_or_else(|| Error::Config(format!("unknown database {db:?}")))?;
            let spec = SynthSpec {
                windows: n,
                seed,
                db,
                subjects,
                sessions,
                noise_mv: noise,
            };
            let m = write_dataset(&out, &spec)?;
            write_run_json(
                &out,
                "synth",
                json!({ "n": n, "seed": seed, "db": db, "subjects": subjects, "sessions": sessions, "noise_mv": noise }),
            )?;
            println!("wrote {} synthetic trials to {}", m.trials.len(), out.display());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::StageOrder(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
