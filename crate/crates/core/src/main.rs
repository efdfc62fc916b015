fn main() {
    std::process::exit(deep_bsde::cli::main_with_args(std::env::args_os()));
}
