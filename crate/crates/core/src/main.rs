fn main() {
    std::process::exit(adaptive_robust::cli::main_with_args(std::env::args_os()));
}
