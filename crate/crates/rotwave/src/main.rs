fn main() {
    std::process::exit(rotwave::cli::run_from_args(std::env::args_os()));
}
