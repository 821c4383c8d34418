use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Serve mcaslite shards as described by a JSON configuration.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Configuration file.
    #[arg(long)]
    conf: PathBuf,
    /// Log level (error, warn, info, debug, trace) or a number 0-4.
    #[arg(long, default_value = "info")]
    debug: String,
    /// Use this arena file instead of the configured ones.
    #[arg(long)]
    device: Option<PathBuf>,
}

fn level(s: &str) -> &str {
    match s {
        "0" => "error",
        "1" => "warn",
        "2" => "info",
        "3" => "debug",
        "4" => "trace",
        s => s,
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level(&args.debug))).init();
    let mut cfg = match mcaslite_server::read_config(&args.conf) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    for w in &cfg.warnings {
        log::warn!("{w}");
    }
    if let Some(d) = &args.device {
        cfg.override_device(d);
    }
    let shards = match mcaslite_server::start(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    for s in &shards {
        println!("shard {} listening on {}", s.id(), s.addr());
    }
    for s in shards {
        s.join();
    }
    ExitCode::SUCCESS
}
