fn main() -> std::process::ExitCode {
    efficientformer::cli::main_with(std::env::args_os())
}
