fn main() {
    std::process::exit(weakiv::cli::run_from_args(std::env::args_os()));
}
