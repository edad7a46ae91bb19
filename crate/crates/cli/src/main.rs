mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// How a command can fail; each maps to one exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Verification(String),
    Run(pcanet::Error),
}

impl From<pcanet::Error> for Failure {
    fn from(e: pcanet::Error) -> Self {
        match e {
            pcanet::Error::Verification(msg) => Failure::Verification(msg),
            other => Failure::Run(other),
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Verification(_) | Failure::Run(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "pcanet", version, about = "PCA-Net operator learning runs")]
pub struct Cli {
    /// JSON config file; flags override it, it overrides the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for artifacts and the resolved config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample Darcy coefficient/solution pairs.
    GenDarcy(GenDarcyArgs),
    /// Sample Navier-Stokes initial/final velocity pairs.
    GenNs(GenNsArgs),
    /// Empirical PCA of one side of a dataset.
    Pca(PcaArgs),
    /// Train a PCA-Net on a dataset.
    Train(TrainArgs),
    /// Error report of a trained model on the test partition.
    Eval(EvalArgs),
    /// Run the spectral Navier-Stokes scheme.
    NsSolve(NsSolveArgs),
    /// Build the ReLU network emulating the scheme.
    EmulateNs(EmulateNsArgs),
    /// Run a numerical study and print its CSV.
    Study(StudyArgs),
    /// Run invariant suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct GenDarcyArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Interior grid points per axis.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub truncation: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub mean: Option<f64>,
    /// Partition sizes as `pca,train,test`.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
pub struct GenNsArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scheme parameters, e.g. `K=8,nu=0.1,T=0.1`.
    #[arg(long)]
    pub ns: Option<String>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub norm: Option<f64>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `input` or `output`.
    #[arg(long)]
    pub side: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    /// `l2`, `h10` or `h<s>` for a periodic Sobolev norm.
    #[arg(long, value_parser = parse_spec)]
    pub spec: Option<pcanet::field::InnerProductSpec>,
    #[arg(long)]
    pub center: Option<bool>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub d_x: Option<usize>,
    #[arg(long)]
    pub d_y: Option<usize>,
    #[arg(long, value_parser = parse_spec)]
    pub input_spec: Option<pcanet::field::InnerProductSpec>,
    #[arg(long, value_parser = parse_spec)]
    pub output_spec: Option<pcanet::field::InnerProductSpec>,
    /// Hidden widths, e.g. `64,64`.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NsSolveArgs {
    #[arg(long)]
    pub ns: Option<String>,
    /// `taylor-green` or `random`.
    #[arg(long)]
    pub initial: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub norm: Option<f64>,
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EmulateNsArgs {
    #[arg(long)]
    pub ns: Option<String>,
    /// `network` or `exact`.
    #[arg(long)]
    pub multiplier: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    /// pca-rate, smoothness, darcy-spectrum or ns-convergence.
    pub kind: String,
    /// `default` or a JSON file holding the study parameters.
    #[arg(long, default_value = "default")]
    pub grid: String,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Suite name or `all`.
    #[arg(long)]
    pub suite: Option<String>,
}

fn parse_split(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p}: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected three sizes pca,train,test".to_string())
}

fn parse_spec(s: &str) -> Result<pcanet::field::InnerProductSpec, String> {
    use pcanet::field::InnerProductSpec;
    match s.to_ascii_lowercase().as_str() {
        "l2" => Ok(InnerProductSpec::L2),
        "h10" => Ok(InnerProductSpec::H10),
        other => match other.strip_prefix('h').map(str::parse::<f64>) {
            Some(Ok(s)) => Ok(InnerProductSpec::Sobolev { s }),
            _ => Err(format!("unknown inner product `{other}`")),
        },
    }
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("PCANET_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Usage(format!("PCANET_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::dispatch(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
                Failure::Run(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_and_spec_parsers() {
        assert_eq!(parse_split("1,2,3").unwrap(), [1, 2, 3]);
        assert!(parse_split("1,2").is_err());
        assert_eq!(parse_spec("H10").unwrap(), pcanet::field::InnerProductSpec::H10);
        assert_eq!(parse_spec("h1.5").unwrap(), pcanet::field::InnerProductSpec::Sobolev { s: 1.5 });
        assert!(parse_spec("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
