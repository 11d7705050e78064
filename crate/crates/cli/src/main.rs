use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout();
    ExitCode::from(ratectl_cli::run(std::env::args_os(), &mut stdout))
}
