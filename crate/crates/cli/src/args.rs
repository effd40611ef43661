use std::path::PathBuf;

use clap::{ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand, ValueEnum};
use hsivar_core::pipeline::config::KEYS;

#[derive(Parser, Debug)]
#[command(name = "hsivar", version, about = "Hyperspectral restoration with a scale-wise autoregressive prior")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Render a synthetic scene
    Synth(SynthArgs),
    /// Apply one degradation and write its sidecar
    Degrade(DegradeArgs),
    /// Stage 1: train the autoencoder on clean cubes
    TrainVqvae(TrainArgs),
    /// Stage 2: train the conditioned transformer against a frozen autoencoder
    TrainVar(TrainVarArgs),
    /// Stage 3: finetune the decoder with SSA layers
    FinetuneSsa(FinetuneArgs),
    /// Restore a degraded cube
    Restore(RestoreArgs),
    /// PSNR and SSIM against a reference
    Eval(EvalArgs),
    /// Parameter, MAC and forward counts for both guidance modes
    ReportComplexity(ComplexityArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub h: usize,
    #[arg(long, default_value_t = 32)]
    pub w: usize,
    #[arg(long, default_value_t = 8)]
    pub c: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub endmembers: Option<usize>,
    #[arg(long)]
    pub smoothness: Option<f32>,
    #[arg(long)]
    pub blobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub case: Option<String>,
    #[arg(long)]
    pub radius: Option<String>,
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub mask_rate: Option<String>,
    #[arg(long)]
    pub band_rate: Option<String>,
}

impl DegradeArgs {
    /// `(flag, value)` for every parameter flag that was given.
    pub fn params(&self) -> Vec<(&'static str, &str)> {
        [
            ("sigma", &self.sigma),
            ("case", &self.case),
            ("radius", &self.radius),
            ("scale", &self.scale),
            ("mask_rate", &self.mask_rate),
            ("band_rate", &self.band_rate),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

/// One optional flag per config key; flags override the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides(pub Vec<(&'static str, String)>);

fn flag_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().copied().filter(|&k| k != "stage")
}

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Overrides(
            flag_keys()
                .filter_map(|k| m.get_one::<String>(k).map(|v| (k, v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(mut cmd: Command) -> Command {
        for k in flag_keys() {
            cmd = cmd.arg(
                clap::Arg::new(k)
                    .long(k.replace('_', "-"))
                    .value_name("VALUE")
                    .help_heading("Config overrides"),
            );
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// HSC1 files or directories of them
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// key = value file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct TrainVarArgs {
    #[arg(long)]
    pub vqvae: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub vqvae: PathBuf,
    #[arg(long)]
    pub var: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct ModelPaths {
    #[arg(long)]
    pub vqvae: PathBuf,
    #[arg(long)]
    pub var: PathBuf,
    #[arg(long)]
    pub ssa: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Dag,
    Cfg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerKind {
    Greedy,
    TopK,
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Degradation sidecar; defaults to `<in>.degradation`
    #[arg(long)]
    pub degradation: Option<PathBuf>,
    #[command(flatten)]
    pub models: ModelPaths,
    #[arg(long, value_enum, default_value_t = Mode::Dag)]
    pub mode: Mode,
    #[arg(long, default_value_t = 2.0)]
    pub cfg_scale: f32,
    #[arg(long, value_enum, default_value_t = SamplerKind::Greedy)]
    pub sampler: SamplerKind,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = 8)]
    pub top_k: usize,
    /// Sampler seed; unused by the greedy sampler
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Also write the report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub models: ModelPaths,
    #[arg(long, default_value_t = 2.0)]
    pub cfg_scale: f32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
