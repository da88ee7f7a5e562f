use std::process::ExitCode;

fn main() -> ExitCode {
    tcleaf::cli::main()
}
