use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lfrc_lab::cli::run(std::env::args()) as u8)
}
