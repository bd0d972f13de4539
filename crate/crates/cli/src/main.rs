use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use vitrm::data::CifarVariant;
use vitrm::metrics::Split;
use vitrm::model::count_params;
use vitrm_cli::fetch::{fetch, FetchOutcome};
use vitrm_cli::run::{self, EvalOptions, Scale, GRID_LATENT, GRID_SUPERVISION};
use vitrm_cli::settings::{data_root, Settings, DATA_ENV};

#[derive(Parser)]
#[command(name = "vitrm", version, about = "Recursive weight-shared vision transformer on CIFAR")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Download, verify and extract a CIFAR binary archive.
    Fetch {
        #[arg(long, default_value = "cifar10")]
        dataset: CifarVariant,
        #[arg(long, env = DATA_ENV)]
        data_dir: Option<PathBuf>,
        /// Alternative archive URL (the digest is still checked).
        #[arg(long)]
        url: Option<String>,
    },
    /// Train with early stopping; writes checkpoints and metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from `<out>/last.ckpt` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy of a checkpoint with exactly T recursion steps.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, env = DATA_ENV)]
        data_dir: Option<PathBuf>,
        /// Override T at inference.
        #[arg(long)]
        recursions: Option<usize>,
        #[arg(long)]
        latent_steps: Option<usize>,
        /// Evaluate the raw weights instead of the EMA shadow.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Supervision-depth x latent-depth grid at batch size 128.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "smoke")]
        scale: Scale,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        grid_n: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        grid_m: Option<Vec<usize>>,
    },
    /// Itemized parameter count.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" | "val" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train | test)")),
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// T
    #[arg(long)]
    recursions: Option<String>,
    /// M
    #[arg(long)]
    latent_steps: Option<String>,
    /// N
    #[arg(long)]
    supervision_steps: Option<String>,
    /// τ
    #[arg(long)]
    halt_threshold: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    val_subset: Option<String>,
    /// Any other field, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, mut s: Settings) -> Result<Settings> {
        if let Some(p) = &self.config {
            s.apply_file(p)?;
        }
        let named = [
            ("dataset", &self.dataset),
            ("batch_size", &self.batch_size),
            ("recursions", &self.recursions),
            ("latent_steps", &self.latent_steps),
            ("supervision_steps", &self.supervision_steps),
            ("halt_threshold", &self.halt_threshold),
            ("seed", &self.seed),
            ("max_epochs", &self.epochs),
            ("subset", &self.subset),
            ("val_subset", &self.val_subset),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                s.set(k, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            s.set(k, v)?;
        }
        s.validate()?;
        Ok(s)
    }
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Fetch { dataset, data_dir, url } => {
            let root = data_root(data_dir);
            match fetch(&root, dataset, url.as_deref())? {
                FetchOutcome::AlreadyPresent(d) => println!("already present and verified: {}", d.display()),
                FetchOutcome::Extracted(d) => println!("verified and extracted: {}", d.display()),
            }
        }
        Cmd::Train { cfg, out, resume } => {
            let s = cfg.resolve(Settings::default())?;
            let data = run::load_dataset(&data_root(cfg.data_dir.clone()), &s)?;
            let summary = run::train(&s, &data, &out, resume)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Eval {
            checkpoint,
            data_dir,
            recursions,
            latent_steps,
            raw,
            batch_size,
            limit,
            split,
        } => {
            let opts = EvalOptions {
                recursions,
                latent_steps,
                ema: !raw,
                batch_size,
                limit,
                split,
            };
            let r = run::eval(&checkpoint, &data_root(data_dir), &opts)?;
            println!("accuracy {:.6}", r.accuracy);
            println!("{}", serde_json::to_string(&r)?);
        }
        Cmd::Ablate {
            cfg,
            scale,
            out,
            grid_n,
            grid_m,
        } => {
            let mut base = Settings::default();
            scale.defaults(&mut base);
            let s = cfg.resolve(base)?;
            let data = run::load_dataset(&data_root(cfg.data_dir.clone()), &s)?;
            let gn = grid_n.unwrap_or_else(|| GRID_SUPERVISION.to_vec());
            let gm = grid_m.unwrap_or_else(|| GRID_LATENT.to_vec());
            let report = run::ablate(&s, &data, &out, scale, &gn, &gm)?;
            print!("{}", run::table(&report));
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Cmd::Inspect { cfg } => {
            let s = cfg.resolve(Settings::default())?;
            let report = count_params(&s.model);
            for (name, n) in &report.items {
                println!("{name:<28} {n:>10}");
            }
            println!();
            for (name, n) in report.components() {
                println!("{name:<28} {n:>10}");
            }
            println!("{:<28} {:>10}", "total", report.total);
        }
    }
    Ok(())
}
