use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cfdiff::config::RunConfig;
use cfdiff::distill::TokenMode;
use cfdiff::guidance::GuidanceMode;
use cfdiff::pipeline::EscalationSchedule;
use cfdiff_cli::{report, ClassifierBackend};

#[derive(Parser)]
#[command(name = "cfdiff", version, about = "Counterfactual explanations for black-box image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cfg,
    Ng,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tokens {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, default_value = "cfdiff.toml")]
    config: PathBuf,
    /// Derive every seed from this value.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Single-tuple escalation with this number of inverted steps.
    #[arg(long)]
    tau: Option<usize>,
    /// Single-tuple escalation with this guidance scale.
    #[arg(long)]
    gs: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    tokens: Option<Tokens>,
    #[arg(long, value_enum)]
    context: Option<Toggle>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.reseed(s);
        }
        if let Some(w) = self.workers {
            cfg.explain.workers = w;
        }
        if self.tau.is_some() || self.gs.is_some() {
            let (t0, w0) = cfg.explain.escalation.tuples[0];
            cfg.explain.escalation = EscalationSchedule::single(self.tau.unwrap_or(t0), self.gs.unwrap_or(w0));
        }
        if let Some(m) = self.mode {
            cfg.explain.mode = match m {
                Mode::Cfg => GuidanceMode::Cfg,
                Mode::Ng => GuidanceMode::Negative,
            };
        }
        if let Some(t) = self.tokens {
            cfg.distill.tokens = match t {
                Tokens::Single => TokenMode::Single,
                Tokens::Multi => TokenMode::Multi,
            };
        }
        if let Some(c) = self.context {
            cfg.distill.use_context = matches!(c, Toggle::On);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a default configuration file.
    InitConfig {
        #[arg(long, default_value = "cfdiff.toml")]
        out: PathBuf,
    },
    /// Render the synthetic dataset to disk.
    GenData(Common),
    /// Train the denoiser, classifier, oracle and embedders.
    Train(Common),
    /// Learn context and class tokens.
    Distill(Common),
    /// Explain one image.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        target: usize,
        /// Query the classifier through a separate process.
        #[arg(long)]
        classifier_process: bool,
    },
    /// Explain the whole test split and score the results.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classifier_process: bool,
        /// Output directory; defaults to a name derived from the settings.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw original | counterfactual | difference rows for a benchmark.
    Report {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    ClassifierServe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn backend(process: bool) -> Result<ClassifierBackend> {
    Ok(if process {
        ClassifierBackend::Process(std::env::current_exe()?)
    } else {
        ClassifierBackend::InProcess
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::InitConfig { out } => {
            if out.exists() {
                bail!("{} already exists", out.display());
            }
            std::fs::write(&out, RunConfig::default().to_toml()?)?;
        }
        Cmd::GenData(c) => cfdiff_cli::cmd_gen_data(&c.load()?)?,
        Cmd::Train(c) => {
            cfdiff_cli::cmd_train(&c.load()?)?;
        }
        Cmd::Distill(c) => {
            cfdiff_cli::cmd_distill(&c.load()?)?;
        }
        Cmd::Explain {
            common,
            image,
            target,
            classifier_process,
        } => {
            let out = cfdiff_cli::cmd_explain(&common.load()?, &image, target, &backend(classifier_process)?)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Cmd::Evaluate {
            common,
            classifier_process,
            out,
        } => {
            let r = cfdiff_cli::cmd_evaluate(&common.load()?, &backend(classifier_process)?, out.as_deref())?;
            println!("{}", r.manifest.metrics.to_table());
            println!("wrote {}", r.dir.join("manifest.json").display());
        }
        Cmd::Report { manifest, out } => {
            let p = report::cmd_report(&manifest, out.as_deref().map(Path::new))?;
            println!("wrote {}", p.display());
        }
        Cmd::ClassifierServe { checkpoint } => cfdiff_cli::cmd_classifier_serve(&checkpoint)?,
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
