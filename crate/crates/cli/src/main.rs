use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(aggdiff_cli::execute(std::env::args_os()))
}
