use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use subskill_vae::model::DynamicsArch;
use subskill_vae::objectives::{CompositeEmbedding, MiSampling, Objective};
use subskill_vae::synthdata::Task;

#[derive(Parser)]
#[command(name = "subskill-vae", version, about = "Trajectory VAE with compositional latent shaping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic point-mass dataset.
    GenData(GenDataArgs),
    /// Train one model per seed and write checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's composite demonstrations.
    Eval(EvalArgs),
    /// Aggregate metrics files across seeds.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum TaskArg {
    DiagWiggle,
    Diag,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::DiagWiggle => Task::DiagWiggle,
            TaskArg::Diag => Task::Diag,
        }
    }
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Manifest JSON; a built-in task is used when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Built-in task used when no manifest is given.
    #[arg(long, value_enum, default_value = "diag_wiggle", conflicts_with = "manifest")]
    pub task: TaskArg,
    #[arg(long, conflicts_with = "manifest")]
    pub demos_per_skill: Option<usize>,
    /// Overrides the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ObjectiveArg {
    Original,
    RegVariational,
    RegNonvariational,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Original => Objective::Original,
            ObjectiveArg::RegVariational => Objective::RegVariational,
            ObjectiveArg::RegNonvariational => Objective::RegNonvariational,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SamplingArg {
    AsWritten,
    Cross,
}

impl From<SamplingArg> for MiSampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::AsWritten => MiSampling::AsWritten,
            SamplingArg::Cross => MiSampling::Cross,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum EmbeddingArg {
    Sum,
    Encode,
}

impl From<EmbeddingArg> for CompositeEmbedding {
    fn from(e: EmbeddingArg) -> Self {
        match e {
            EmbeddingArg::Sum => CompositeEmbedding::Sum,
            EmbeddingArg::Encode => CompositeEmbedding::Encode,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ArchArg {
    Mlp,
    CausalConv,
}

impl From<ArchArg> for DynamicsArch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Mlp => DynamicsArch::Mlp,
            ArchArg::CausalConv => DynamicsArch::CausalConv,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub objective: ObjectiveArg,
    /// Weight of the mutual-information bound [default: 0.1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated seeds [default: 0,1,2,3,4].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long, value_enum)]
    pub mi_sampling: Option<SamplingArg>,
    #[arg(long, value_enum)]
    pub composite_embedding: Option<EmbeddingArg>,
    #[arg(long)]
    pub rollout_t: Option<usize>,
    #[arg(long)]
    pub composite_rollouts: Option<usize>,
    #[arg(long)]
    pub d_latent: Option<usize>,
    #[arg(long)]
    pub encoder_hidden: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long)]
    pub decoder_hidden: Option<usize>,
    #[arg(long, value_enum)]
    pub dynamics_arch: Option<ArchArg>,
    #[arg(long)]
    pub mixture_components: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// How the composite latent is formed; only that MSE column is filled.
    #[arg(long, value_enum, default_value = "sum")]
    pub mode: EmbeddingArg,
    /// Output directory [default: `eval` next to the checkpoint].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Run directories containing `*.metrics.csv` files.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one SVG chart per metric.
    #[arg(long)]
    pub plot: bool,
}
