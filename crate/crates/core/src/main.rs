fn main() {
    std::process::exit(cgh_core::cli::main_with_args(std::env::args_os()));
}
