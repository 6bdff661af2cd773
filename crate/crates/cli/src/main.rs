mod commands;
mod sources;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hg3d::config::{Precision, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "hg3d", version, about = "Volumetric hand-pose estimation with stacked 3D hourglass networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Args, Debug, Clone)]
pub struct Global {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single preprocessing worker and fixed reduction order.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "on", value_name = "on|off")]
    pub deterministic: Option<Toggle>,
    #[arg(long, global = true, value_parser = parse_precision, value_name = "wide|narrow")]
    pub precision: Option<Precision>,
    #[arg(long, global = true, value_name = "on|off")]
    pub bone_loss: Option<Toggle>,
    #[arg(long, global = true)]
    pub stacks: Option<usize>,
    /// Input voxel resolution; the output is half of it.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Top responding voxels averaged when decoding a joint.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Subject held out for testing (manifest data only).
    #[arg(long, global = true)]
    pub subject_holdout: Option<usize>,
    /// Dataset manifest; without one, synthetic hands are generated from the `synth.*` keys.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: hg3d::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Reproject one MSRA depth frame and write its occupied voxels.
    Voxelize {
        frame: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
    },
    /// Write the synthetic dataset as a pose file plus one point file per sample.
    Synth,
    /// Train from scratch or resume; writes model.ckpt, optim.state, loss.log and config.txt.
    Train {
        /// Continue from model.ckpt and optim.state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the test split, or compare two prediction files.
    Eval {
        #[arg(long, conflicts_with_all = ["predictions", "truth"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "truth")]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "predictions")]
        truth: Option<PathBuf>,
    },
    /// Write predicted poses for the test split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the full miniature network; fails above 1e-4.
    Gradcheck,
    /// Mean error as a function of K, from a checkpoint or from ideal target heatmaps.
    SweepK {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,9,16,27,64")]
        ks: Vec<usize>,
    },
}

fn effective_config(g: &Global) -> hg3d::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = g.deterministic {
        cfg.train.deterministic = d.on();
    }
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    if let Some(b) = g.bone_loss {
        cfg.train.bone_loss_enabled = b.on();
    }
    if let Some(s) = g.stacks {
        cfg.model.stacks = s;
    }
    if let Some(r) = g.resolution {
        cfg.set("model.input_res", &r.to_string(), 0)?;
    }
    if let Some(k) = g.k {
        cfg.decode.k = k;
    }
    if let Some(e) = g.epochs {
        cfg.train.epochs = e;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = effective_config(&cli.global).map_err(anyhow::Error::from).and_then(|cfg| {
        if cli.global.print_config {
            print!("{}", cfg.to_text());
            return Ok(());
        }
        commands::run(&cli.command, &cli.global, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<hg3d::Error>() {
                Some(hg3d::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
