fn main() {
    std::process::exit(crisis_core::cli::main_with_args(std::env::args_os()));
}
