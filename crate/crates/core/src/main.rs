use std::process::ExitCode;

use clap::Parser;
use lqlp::cli::{run, Cli};
use lqlp::Error;

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::RankDeficient { required, .. } = e {
                eprintln!("hint: collect a longer or richer exploration so that [X; U] reaches rank {required}");
            }
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
