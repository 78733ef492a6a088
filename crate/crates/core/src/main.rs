use std::process::ExitCode;

fn main() -> ExitCode {
    specmerge::cli::main_with_args(std::env::args_os())
}
