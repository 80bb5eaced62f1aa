use std::process::ExitCode;

fn main() -> ExitCode {
    cmanet::cli::main_with(std::env::args_os())
}
