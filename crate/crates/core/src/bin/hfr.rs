fn main() {
    std::process::exit(hfr_adapt::cli::main_with_args(std::env::args_os()));
}
