use clap::Parser;

use geoalign::cli::{Cli, CliError};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success; anything else is a
            // flag/usage validation failure.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    init_logging(&cli.log_level);
    init_threads();
    if let Err(CliError { code, message }) = geoalign::cli::run(cli) {
        eprintln!("error: {message}");
        std::process::exit(code);
    }
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Cap internal parallelism via GEOALIGN_THREADS (default: available cores).
fn init_threads() {
    if let Ok(v) = std::env::var("GEOALIGN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
