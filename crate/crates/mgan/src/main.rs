use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mgan::cli::run() as u8)
}
