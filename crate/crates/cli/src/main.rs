use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match sipml_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    ExitCode::from(sipml_cli::run(cli))
}
