//! `bmetrics`: exact behavioral metrics, training sweeps and denoising checks
//! on finite exogenous block MDPs.
//!
//! Exit codes: 0 on success, 2 when a certificate or isolation check fails,
//! 1 on any other error.

mod cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmetrics", version, about = "Behavioral metrics on exogenous block MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a seeded instance as JSON.
    Gen(GenArgs),
    /// Compute an exact metric and export the distance matrix as CSV.
    Exact(ExactArgs),
    /// Train an encoder (or a sweep of encoders) from a run config.
    Train(TrainArgs),
    /// Denoising factor of a trained run or of a reference encoder.
    EvalDf(EvalDfArgs),
    /// Metric estimation on the side of an agent encoder.
    Isolated(IsolatedArgs),
    /// Check the denoising certificates; exits 2 if any fails.
    Verify(VerifyArgs),
    /// Aggregate final denoising factors over run directories.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub n_states: usize,
    #[arg(long, default_value_t = 2)]
    pub n_actions: usize,
    #[arg(long, default_value_t = 8)]
    pub n_noise: usize,
    /// iid-discrete or frame-index.
    #[arg(long, default_value = "iid-discrete")]
    pub noise: String,
    /// Keep only this many successors per transition row.
    #[arg(long)]
    pub branching: Option<usize>,
    /// tabular, feature or projected.
    #[arg(long, default_value = "tabular")]
    pub emission: String,
    /// Gaussian emission noise with this standard deviation instead of the one-hot noise block.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Dimension of the Gaussian noise block.
    #[arg(long, default_value_t = 8)]
    pub noise_dim: usize,
    /// Scale of the one-hot noise block.
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PolicyArgs {
    /// Use an eps-soft optimal policy instead of the uniform one.
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Args)]
pub struct ExactArgs {
    #[arg(long)]
    pub instance: PathBuf,
    /// bsm, pbsm, mico or simsr.
    #[arg(long, default_value = "bsm")]
    pub metric: String,
    #[arg(long, default_value_t = 1.0)]
    pub c_r: f64,
    /// Defaults to the instance discount.
    #[arg(long)]
    pub c_t: Option<f64>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, default_value_t = bmetrics::exact::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = bmetrics::exact::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Distance matrix CSV (row, col, value).
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags that override fields of a run config file.
#[derive(Args, Default)]
pub struct RunOverrides {
    /// Run config JSON; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Load the instance from a file instead of generating it.
    #[arg(long)]
    pub instance: Option<PathBuf>,
    #[arg(long)]
    pub instance_seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// dbc, dbc-normed, mico, simsr, rap or none.
    #[arg(long)]
    pub variant: Option<String>,
    /// none, l2, layer-norm or max-norm.
    #[arg(long)]
    pub normalization: Option<String>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Comma-separated noise scales to sweep.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Comma-separated Gaussian noise dimensions to sweep.
    #[arg(long, value_delimiter = ',')]
    pub noise_dims: Option<Vec<usize>>,
    /// Comma-separated master seeds to sweep.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Also evaluate on the shifted-noise variant with this seed.
    #[arg(long)]
    pub ood_shift_seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalDfArgs {
    /// Run directory holding config.json and checkpoint.json.
    #[arg(long, conflicts_with_all = ["instance", "encoder"])]
    pub run: Option<PathBuf>,
    /// Evaluate the run on its shifted-noise variant.
    #[arg(long, requires = "run")]
    pub ood: bool,
    #[arg(long, requires = "encoder")]
    pub instance: Option<PathBuf>,
    /// oracle, noise-only or constant.
    #[arg(long, requires = "instance")]
    pub encoder: Option<String>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Sample even when the exact expectation is available.
    #[arg(long)]
    pub sampled: bool,
    #[arg(long, default_value_t = 256)]
    pub n_anchors: usize,
    #[arg(long, default_value_t = 16)]
    pub n_pos: usize,
    #[arg(long, default_value_t = 16)]
    pub n_neg: usize,
    /// l2 or l1.
    #[arg(long, default_value = "l2")]
    pub distance: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as a one-row CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct IsolatedArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    /// zp, zp-rp or none.
    #[arg(long, default_value = "zp")]
    pub agent: String,
    /// Metric encoder loss: dbc, dbc-normed, mico, simsr, rap or none.
    #[arg(long, default_value = "mico")]
    pub metric: String,
    /// Output normalization of the metric encoder.
    #[arg(long)]
    pub metric_normalization: Option<String>,
    /// Give the metric encoder its own transition stream.
    #[arg(long)]
    pub separate_data: bool,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Negative control: let the prediction loss reach the metric encoder.
    #[arg(long)]
    pub inject_leak: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Instance files to check.
    #[arg(long = "instance")]
    pub instances: Vec<PathBuf>,
    /// Also check this many seeded random instances.
    #[arg(long, default_value_t = 0)]
    pub random: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Aggregate CSV; the JSON rows always go to stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    // clap's own usage-error code is 2, which is reserved for failed checks here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd::gen(&a),
        Command::Exact(a) => cmd::exact(&a),
        Command::Train(a) => cmd::train(&a),
        Command::EvalDf(a) => cmd::eval_df(&a),
        Command::Isolated(a) => cmd::isolated(&a),
        Command::Verify(a) => cmd::verify(&a),
        Command::Report(a) => cmd::report(&a),
    };
    match result {
        Ok(cmd::Outcome::Ok) => ExitCode::SUCCESS,
        Ok(cmd::Outcome::Failed) => ExitCode::from(2),
        Err(e) => {
            if let Some(bmetrics::Error::IsolationViolated { .. }) = e.downcast_ref() {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
