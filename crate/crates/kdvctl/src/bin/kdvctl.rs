fn main() -> std::process::ExitCode {
    kdvctl::cli::main_with_args(std::env::args_os())
}
