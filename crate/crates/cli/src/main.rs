use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmsurv::config::RunConfig;
use cmsurv::harness;
use cmsurv::{Error, Result};

#[derive(Parser)]
#[command(name = "cmsurv", version, about = "Cross-modality masked pretraining and survival prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic cohort (volumes, manifest, true-risk sidecar).
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Masked pretraining; writes pretrain.ckpt and loss_log.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Fit the survival head on the frozen trunk; writes model.ckpt and risk.csv.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a manifest with a fine-tuned model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// K-fold cross-validation; writes ci.csv, logrank.csv and KM curves.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Mask-ratio sweep per modality; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated ratios in [0, 1).
        #[arg(long)]
        ratios: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_parser = ["pfs", "os"])]
    endpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use one shared mask token instead of variable-specific ones.
    #[arg(long)]
    no_cvs: bool,
    /// Null the cross-attention in both completion directions.
    #[arg(long)]
    no_cmc: bool,
    #[arg(long, value_parser = ["image", "tabular", "both"])]
    modality: Option<String>,
    /// Override any config key, e.g. `--set ablation=VM`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    /// File, then `--set` overrides, then dedicated flags.
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(e) = &self.endpoint {
            cfg.set("endpoint", e)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(m) = &self.modality {
            cfg.set("modality", m)?;
        }
        if self.no_cvs {
            cfg.set("tabular.cvs", "false")?;
        }
        if self.no_cmc {
            cfg.set("cmc.enabled", "false")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate { common } => {
            let cfg = common.config()?;
            let files = harness::generate(&cfg, &common.out)?;
            println!("manifest {}", files.manifest.display());
            println!("truth {}", files.truth.display());
        }
        Cmd::Pretrain { common, manifest } => {
            let cfg = common.config()?;
            let o = harness::cmd_pretrain(&cfg, &manifest, &common.out)?;
            if let Some(last) = o.log.last() {
                println!("epochs {} final total loss {:.6}", o.log.len(), last.total);
            }
            println!("checkpoint {}", o.checkpoint.display());
        }
        Cmd::Finetune {
            common,
            manifest,
            checkpoint,
        } => {
            let cfg = common.config()?;
            let o = harness::cmd_finetune(&cfg, &manifest, &checkpoint, &common.out)?;
            println!("model {}", o.model.display());
        }
        Cmd::Evaluate { common, manifest, model } => {
            let cfg = common.config()?;
            let ev = harness::cmd_evaluate(&cfg, &manifest, &model, &common.out)?;
            print!("{} CI {:.4}", cfg.endpoint.as_str(), ev.ci);
            match ev.logrank {
                Some(l) => println!(" log-rank p {:.3e}", l.p),
                None => println!(),
            }
        }
        Cmd::Cv { common, manifest } => {
            let cfg = common.config()?;
            let r = harness::cmd_cv(&cfg, &manifest, &common.out)?;
            for f in &r.folds {
                println!("fold {} CI {:.4}", f.fold, f.ci);
            }
            println!("{} CI {:.4} ± {:.4}", r.endpoint.as_str(), r.mean, r.sd);
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
        }
        Cmd::Sweep {
            common,
            manifest,
            ratios,
        } => {
            let mut cfg = common.config()?;
            if let Some(r) = ratios {
                cfg.set("sweep.ratios", &r)?;
                cfg.validate()?;
            }
            for row in harness::cmd_sweep(&cfg, &manifest, &common.out)? {
                println!("{} ratio {} CI {:.4}", row.modality, row.ratio, row.ci);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            log::debug!("{e:?}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
