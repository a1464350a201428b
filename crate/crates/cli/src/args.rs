use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dualglow", version, about = "Conditional flow-based modality transfer")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Flow levels (for `complexity`, the largest level count reported).
    #[arg(long, global = true, value_name = "N")]
    pub levels: Option<usize>,
    /// Flow steps per level.
    #[arg(long, global = true, value_name = "N")]
    pub depth: Option<usize>,
    /// Weight of the source marginal likelihood term.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Weight of the discriminator losses.
    #[arg(long = "w-cls", global = true, value_name = "W")]
    pub w_cls: Option<f64>,
    /// Sampling temperature; 0 gives the conditional mode.
    #[arg(long, global = true, value_name = "T")]
    pub temperature: Option<f64>,
    /// Side label for every sample: a number in [0, 1] or `class:K`.
    #[arg(long = "side-label", global = true, value_name = "LABEL")]
    pub side_label: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired toy dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Sample target images from a checkpoint.
    Sample(SampleArgs),
    /// Score predicted images against a dataset's targets.
    Evaluate(EvaluateArgs),
    /// Check invertibility, log-determinants and gradients.
    Verify(VerifyArgs),
    /// Count coupling inputs for flat and hierarchical flows.
    Complexity(ComplexityArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// blur_pair, edge_pair, cflip_pair or cmonotone_pair.
    #[arg(long, default_value = "blur_pair")]
    pub kind: String,
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    #[arg(long = "noise-std", default_value_t = 0.05)]
    pub noise_std: f64,
    /// Image shape as C,H,W.
    #[arg(long, default_value = "1,16,16", value_parser = parse_shape)]
    pub image: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    None,
    Continuous,
    Categorical,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "max-steps")]
    pub max_steps: Option<usize>,
    /// Hidden channels of the coupling networks.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Side-information mode; overrides the configuration.
    #[arg(long, value_enum)]
    pub side: Option<SideArg>,
    /// Class count for categorical side labels.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Dataset whose source images are translated.
    #[arg(long, value_name = "DIR", conflicts_with = "input", required_unless_present = "input")]
    pub data: Option<PathBuf>,
    /// DGT1 stack of source images `[N, C, H, W]`.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Rows in the PNG montage; 0 disables it.
    #[arg(long = "montage-rows", default_value_t = 8)]
    pub montage_rows: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// DGT1 stack of predicted images, as written by `sample`.
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    /// Dataset holding the reference targets.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Rows in the PNG montage; 0 disables it.
    #[arg(long = "montage-rows", default_value_t = 8)]
    pub montage_rows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Zero,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    /// Inverse couplings use the wrong sign for the shift.
    NegateShift,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Checkpoint to verify instead of a freshly built model.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Input shape C,H,W of a freshly built model.
    #[arg(long, default_value = "1,4,4", value_parser = parse_shape)]
    pub dims: [usize; 3],
    #[arg(long, value_enum, default_value = "random")]
    pub init: InitArg,
    /// Standard deviation of the noise added for `--init random`.
    #[arg(long, default_value_t = 0.1)]
    pub perturb: f64,
    /// Inject a fault to confirm the checks catch it.
    #[arg(long, value_enum)]
    pub fault: Option<FaultArg>,
    /// Random inputs per round-trip check.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Coordinates checked per parameter tensor; 0 checks every coordinate.
    #[arg(long = "grad-coords", default_value_t = 6)]
    pub grad_coords: usize,
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    /// Elements per unit block (N).
    #[arg(long, default_value_t = 1)]
    pub base: usize,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x', '×'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(format!("expected three positive sizes C,H,W, got {s:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(parse_shape("1,16,16"), Ok([1, 16, 16]));
        assert_eq!(parse_shape("2x8x8"), Ok([2, 8, 8]));
        assert!(parse_shape("1,0,4").is_err());
        assert!(parse_shape("1,4").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
