use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "headlab", version, about = "Train a micro diffusion transformer and search for attention heads to perturb")]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model with flow matching and write a checkpoint.
    Train(TrainArgs),
    /// Draw one guided sample.
    Sample(SampleArgs),
    /// Greedy head search (HeadHunter).
    Headhunt(HeadhuntArgs),
    /// Evaluate a (w, u) grid for a fixed head set.
    Sweep(SweepArgs),
    /// Summarize a selection document.
    Inspect(InspectArgs),
    /// Dump the synthetic training set as PGM files plus a manifest.
    Dataset(DatasetArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML or JSON run config with [model], [train] and [data] sections.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path; the loss curve goes next to it as `<stem>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Override `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone)]
pub struct GuidanceArgs {
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 0.0)]
    pub w_cfg: f64,
    /// Number of Euler steps.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// What the perturbation term extrapolates from: `cond` or `cfg`.
    #[arg(long, default_value = "cond")]
    pub pert_anchor: String,
}

#[derive(Args, Clone)]
pub struct PerturbArgs {
    /// Perturbation method, e.g. pag, soft_pag, uniform, soft_seg, temperature.
    #[arg(long, default_value = "pag")]
    pub method: String,
    /// Interpolation weight for the soft methods.
    #[arg(long, default_value_t = 1.0)]
    pub u: f64,
    /// Softmax temperature for `temperature`.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Class id, or `null` for the unconditional token.
    #[arg(long, default_value = "null")]
    pub cond: String,
    /// Perturbation guidance scale.
    #[arg(long, default_value_t = 3.0)]
    pub w_pert: f64,
    /// `all`, `L<layer>:*`, or a list like `0:1,2:3`.
    #[arg(long, conflicts_with = "selection")]
    pub heads: Option<String>,
    /// Take the head set (and method) from a selection document.
    #[arg(long)]
    pub selection: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub perturb: PerturbArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    /// Output directory for `sample.pgm` and `trajectory.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct HeadhuntArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Objective to maximize, e.g. brightness, sharpness, template_corr:2.
    #[arg(long)]
    pub objective: String,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub rounds: usize,
    /// CSV of `cond,seed` lines; defaults to one pair per class.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    pub w_pert: f64,
    #[command(flatten)]
    pub perturb: PerturbArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    /// Worker threads for candidate evaluation.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, conflicts_with = "selection")]
    pub heads: Option<String>,
    #[arg(long)]
    pub selection: Option<PathBuf>,
    #[arg(long, default_value = "0,1,2,4,6")]
    pub w_grid: String,
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    pub u_grid: String,
    #[arg(long)]
    pub objective: String,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value = "soft_pag")]
    pub method: String,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Per-row CSV; the cell matrix goes to `<stem>.matrix.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Checkpoint the selection is checked against.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub selection: PathBuf,
    /// Second selection to report overlap with.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Args)]
pub struct DatasetArgs {
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise: bool,
    #[arg(long)]
    pub out: PathBuf,
}
