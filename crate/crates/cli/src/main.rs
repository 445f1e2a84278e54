use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(evfuse::run(std::env::args_os()))
}
