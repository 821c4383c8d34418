use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Plugin host launched by a shard; not meant to be run by hand.
#[derive(Parser)]
struct Args {
    /// Queue file created by the shard.
    #[arg(long)]
    queue: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let code = mcaslite_ado::runtime::process_main(&args.queue, &mcaslite_server::default_registry());
    ExitCode::from(code.clamp(0, 255) as u8)
}
