use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kvcapsule::keycodec::ReconstructorKind;
use kvcapsule::pipeline::{Ablation, DecodePath};
use kvcapsule::synth::Spectrum;
use kvcapsule::valuecodec::MeanPolicy;

#[derive(Debug, Parser)]
#[command(
    name = "kvcapsule",
    version,
    about = "Asymmetric visual KV-cache compression: fit, compress, simulate, analyze",
    args_override_self = true,
    after_help = "Every subcommand accepts --config FILE.json, an object whose keys are long flag \
                  names. Flags given on the command line override the file."
)]
pub struct Cli {
    /// JSON object of flag values, applied before command-line flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic vision KV samples and a decode trace as KVD files.
    Synth(SynthArgs),
    /// Train per-layer key and value codecs into a KVC bundle.
    Fit(FitArgs),
    /// Apply a bundle to a KVD dump.
    Compress(CompressArgs),
    /// Run a decode trace over a prefilled cache.
    Simulate(SimulateArgs),
    /// Redundancy, rank, overlap and fidelity reports.
    Analyze(AnalyzeArgs),
    /// Paired fused and baseline runs with byte-traffic ratios.
    Bench(BenchArgs),
    /// Memory footprint table and break-even point.
    Memplan(MemplanArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PathArg {
    Baseline,
    Reconstruct,
    Fused,
    Static,
}

impl From<PathArg> for DecodePath {
    fn from(p: PathArg) -> Self {
        match p {
            PathArg::Baseline => DecodePath::BaselineFull,
            PathArg::Reconstruct => DecodePath::Reconstruct,
            PathArg::Fused => DecodePath::Fused,
            PathArg::Static => DecodePath::StaticCompressed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationArg {
    Both,
    Keys,
    Values,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Both => Ablation::Both,
            AblationArg::Keys => Ablation::KeysOnly,
            AblationArg::Values => Ablation::ValuesOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Linear,
    Mlp2,
}

impl From<KindArg> for ReconstructorKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Linear => ReconstructorKind::Linear,
            KindArg::Mlp2 => ReconstructorKind::Mlp2,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MeanArg {
    PerSample,
    Global,
}

impl From<MeanArg> for MeanPolicy {
    fn from(m: MeanArg) -> Self {
        match m {
            MeanArg::PerSample => MeanPolicy::PerSample,
            MeanArg::Global => MeanPolicy::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SpectrumArg {
    Flat,
    Decaying,
}

impl From<SpectrumArg> for Spectrum {
    fn from(s: SpectrumArg) -> Self {
        match s {
            SpectrumArg::Flat => Spectrum::Flat,
            SpectrumArg::Decaying => Spectrum::Decaying,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub samples: u64,
    /// Decode steps in trace.kvd; 0 skips the trace and attention maps.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub d_head: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub group_size: usize,
    #[arg(long, default_value_t = 4)]
    pub text_tokens: usize,
    /// One target per layer, or one for all layers.
    #[arg(long, value_delimiter = ',', default_values_t = [0.99, 0.87, 0.66])]
    pub key_cosine: Vec<f64>,
    #[arg(long, default_value_t = 0.35)]
    pub value_cosine: f64,
    /// Token-space rank of the keys; defaults to n.
    #[arg(long)]
    pub key_rank: Option<usize>,
    #[arg(long, value_enum, default_value_t = SpectrumArg::Flat)]
    pub value_spectrum: SpectrumArg,
    #[arg(long)]
    pub value_rank: Option<usize>,
    #[arg(long, default_value_t = 0.15)]
    pub drift: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// KVD sample files with `layer{l}.head{h}.K/V` entries.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.75)]
    pub r0: f64,
    #[arg(long, default_value_t = 0.05)]
    pub r1: f64,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    /// Mask loss weight.
    #[arg(long, default_value_t = 1.0)]
    pub mask_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau_start: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau_end: f64,
    /// First hard-mask epoch; defaults to half of --epochs.
    #[arg(long)]
    pub hard_from: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, value_enum, default_value_t = KindArg::Linear)]
    pub kind: KindArg,
    /// Hidden width for mlp2; defaults to n.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_enum, default_value_t = MeanArg::PerSample)]
    pub mean_policy: MeanArg,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// One KVD file per image, in cache order.
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Bytes per cached element used by the traffic counters.
    #[arg(long, default_value_t = 4)]
    pub kv_bytes: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = PathArg::Baseline)]
    pub path: PathArg,
    #[arg(long, value_enum, default_value_t = AblationArg::Both)]
    pub ablation: AblationArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// KVD sample files; `step{t}.attn` entries feed the overlap report.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.90, 0.95, 0.99])]
    pub levels: Vec<f64>,
    /// Top-set size as a fraction of vision tokens.
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    /// With --trace, adds attention fidelity of every decode path against baseline.
    #[arg(long, requires = "trace")]
    pub bundle: Option<PathBuf>,
    #[arg(long, requires = "bundle")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct MemplanArgs {
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    #[arg(long, default_value_t = 4)]
    pub kv_heads: u64,
    #[arg(long, default_value_t = 128)]
    pub d_head: u64,
    #[arg(long, default_value_t = 2)]
    pub kv_bytes: u64,
    #[arg(long, default_value_t = 196)]
    pub n: u64,
    #[arg(long, default_value_t = 36)]
    pub layers: usize,
    #[arg(long, default_value_t = 0.75)]
    pub r0: f64,
    #[arg(long, default_value_t = 0.05)]
    pub r1: f64,
    #[arg(long, default_value_t = 0)]
    pub prompt_tokens: u64,
    #[arg(long, default_value_t = 0)]
    pub generated: u64,
    /// Sweep covers 1..=max-images images of n tokens.
    #[arg(long, default_value_t = 20)]
    pub max_images: u64,
    #[arg(long, value_enum, default_value_t = KindArg::Linear)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 0)]
    pub hidden: u64,
    #[arg(long, value_enum, default_value_t = MeanArg::PerSample)]
    pub mean_policy: MeanArg,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
