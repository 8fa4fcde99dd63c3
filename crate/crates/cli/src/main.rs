use std::process::ExitCode;

fn main() -> ExitCode {
    fairspec_cli::init_logging();
    fairspec_cli::main_with_args(std::env::args_os())
}
