//! `fam`: train toy BSWA/FAM models, sweep PassKey accuracy, dump masks,
//! probe receptive fields and run gradient checks.
//!
//! Exit codes: 0 ok, 1 check failed, 2 usage or configuration error,
//! 3 training aborted on a non-finite loss.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "fam", version, args_override_self = true)]
#[command(about = "Block sliding window and feedback attention memory toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint.famc, train.csv and manifest.txt.
    Train(TrainArgs),
    /// Streamed PassKey accuracy per filler length, as CSV.
    EvalPasskey(EvalArgs),
    /// Print an attention mask as a text grid.
    DumpMask(DumpMaskArgs),
    /// Gradient magnitude reaching each earlier block, as CSV.
    ProbeRf(ProbeArgs),
    /// Compare backprop with central differences on a preset model.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// key=value file; flags override it, it overrides defaults. A
    /// manifest.txt from an earlier run is accepted.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Falls back to the config file, then `FAM_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// passkey or copy.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dmodel: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_mult: Option<usize>,
    #[arg(long)]
    pub block: Option<usize>,
    /// Past blocks kept in the sliding window.
    #[arg(long)]
    pub m: Option<usize>,
    /// FAM length; 0 trains plain BSWA.
    #[arg(long)]
    pub fam: Option<usize>,
    #[arg(long)]
    pub xl_window: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Random state passing probability.
    #[arg(long)]
    pub rsp: Option<f64>,
    /// Random position offset.
    #[arg(long)]
    pub rpo: Option<bool>,
    #[arg(long)]
    pub diversity: Option<f64>,
    #[arg(long)]
    pub stop_grad: Option<bool>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// off or adaptive:THRESHOLD:INCREMENT:PATIENCE.
    #[arg(long)]
    pub curriculum: Option<String>,
    #[arg(long)]
    pub filler_min: Option<usize>,
    #[arg(long)]
    pub filler_max: Option<usize>,
    /// repeated or random.
    #[arg(long)]
    pub filler_kind: Option<String>,
    /// PassKey digits or copy prefix length.
    #[arg(long)]
    pub key_len: Option<usize>,
    #[arg(long)]
    pub repeat_segment: Option<usize>,
    /// Print progress to stderr every N steps (0 = quiet).
    #[arg(long, default_value_t = 0)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// Comma-separated filler lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 16, 32, 64, 128, 256, 512])]
    pub fillers: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 3)]
    pub digits: usize,
    #[arg(long, env = "FAM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Value of the model column; defaults to `fam` or `bswa-m<m>`.
    #[arg(long)]
    pub tag: Option<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpMaskArgs {
    /// Sequence length; required without FAM.
    #[arg(long = "T")]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub b: usize,
    #[arg(long, default_value_t = 0)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub f: usize,
    #[arg(long)]
    pub w: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// bswa or fam.
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, default_value_t = 6)]
    pub kmax: usize,
    #[arg(long, default_value_t = 4)]
    pub block: usize,
    /// FAM length for `--arch fam`.
    #[arg(long, default_value_t = 2)]
    pub fam: usize,
    #[arg(long, default_value_t = 16)]
    pub dmodel: usize,
    #[arg(long, env = "FAM_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Preset: tiny_fam or tiny_bswa.
    #[arg(long)]
    pub config: String,
    #[arg(long, default_value_t = 1e-5)]
    pub threshold: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, env = "FAM_SEED", default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::EvalPasskey(a) => commands::eval_passkey(&a),
        Command::DumpMask(a) => commands::dump_mask(&a),
        Command::ProbeRf(a) => commands::probe_rf(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code_for(&e))
        }
    }
}
