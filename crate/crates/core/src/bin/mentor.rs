use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use mentor::annotate::{self, ServiceOptions};
use mentor::env::EnvKind;
use mentor::trainer::{LabelerKind, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "mentor", version, about = "Train and inspect hierarchical goal-reaching agents")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent, writing metrics and a checkpoint to the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint's greedy success rate.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Write reward, distance and penalty grids for a checkpoint as CSV.
    ExportHeatmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        resolution: usize,
        #[arg(long, default_value = "heatmap.csv")]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    labeler: Option<LabelerKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    no_hf: bool,
    #[arg(long)]
    no_ddc: bool,
    #[arg(long)]
    no_eed: bool,
    /// Serve the annotation API on this port.
    #[arg(long)]
    serve_port: Option<u16>,
    /// Directory of static files served next to the API.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let ckpt = args.out.join("checkpoint.bin");
    let mut trainer = if args.resume {
        let mut t = Trainer::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        if let Some(n) = args.episodes {
            t.state_mut().config.episodes = n;
        }
        t
    } else {
        let mut cfg = match &args.config {
            Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(e) = args.env {
            cfg.env = e;
        }
        if let Some(l) = args.labeler {
            cfg.labeler = l;
        }
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(n) = args.episodes {
            cfg.episodes = n;
        }
        cfg.no_hf |= args.no_hf;
        cfg.no_ddc |= args.no_ddc;
        cfg.no_eed |= args.no_eed;
        if args.serve_port.is_some() {
            cfg.serve_port = args.serve_port;
        }
        if let Some(d) = &args.static_dir {
            cfg.static_dir = Some(d.display().to_string());
        }
        cfg.validate()?;
        std::fs::create_dir_all(&args.out)?;
        std::fs::write(args.out.join("config.toml"), cfg.to_toml_string())?;
        Trainer::new(cfg)?
    };

    let cfg = trainer.config().clone();
    let needs_service = cfg.labeler != LabelerKind::Oracle;
    let _service = match cfg.serve_port {
        Some(port) => {
            let addr = SocketAddr::from(([127, 0, 0, 1], port));
            let opts = ServiceOptions {
                spool: Some(args.out.join("labels.jsonl")),
                static_dir: cfg.static_dir.as_ref().map(PathBuf::from),
            };
            let (handle, bridge) = annotate::start(addr, trainer.env(), opts)?;
            log::info!("annotation service listening on {}", handle.url());
            trainer.attach_bridge(bridge);
            Some(handle)
        }
        None if needs_service => bail!("the {:?} labeler needs --serve-port", cfg.labeler),
        None => None,
    };

    let summary = trainer.run(Some(&args.out))?;
    match summary.first_success {
        Some(e) => println!("episodes: {}, first fully successful evaluation after {e}", summary.episodes),
        None => println!("episodes: {}, no fully successful evaluation", summary.episodes),
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Command::Train(args) => train(args),
        Command::Eval { checkpoint, episodes } => {
            let t = Trainer::load(&checkpoint)?;
            println!("success rate: {:.3}", t.evaluate(episodes)?);
            Ok(())
        }
        Command::ExportHeatmaps {
            checkpoint,
            resolution,
            out,
        } => {
            let t = Trainer::load(&checkpoint)?;
            t.write_heatmap(resolution, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::DefaultConfig => {
            print!("{}", TrainConfig::default().to_toml_string());
            Ok(())
        }
    }
}
