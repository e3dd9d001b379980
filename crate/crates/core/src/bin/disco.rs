use std::process::ExitCode;

fn main() -> ExitCode {
    disco_core::cli::run(std::env::args_os())
}
