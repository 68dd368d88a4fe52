//! Library side of the `mmfas` binary: configuration resolution, the
//! gradient-check battery, and the subcommand handlers. Kept as a library
//! so integration tests can drive the same code paths in-process.

pub mod battery;
pub mod commands;
pub mod config;

use clap::Parser;
use mmfas_core::tensor::TensorError;

use commands::{Cli, Cmd};

/// Parse the command line, run the chosen subcommand, and return the
/// process exit code: 0 on success, 3 on numeric failure, 2 otherwise.
/// Usage errors exit with code 2 via clap before this returns.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(a) => commands::gen_data(a),
        Cmd::Extract(a) => commands::extract(a),
        Cmd::Pretrain(a) => commands::pretrain_cmd(a),
        Cmd::Finetune(a) => commands::finetune_cmd(a),
        Cmd::Evaluate(a) => commands::evaluate_cmd(a),
        Cmd::Sweep(a) => commands::sweep_cmd(a),
        Cmd::Gradcheck(a) => commands::gradcheck_cmd(a),
        Cmd::DumpRecon(a) => commands::dump_recon_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                TensorError::Numeric(_) => 3,
                _ => 2,
            }
        }
    }
}
