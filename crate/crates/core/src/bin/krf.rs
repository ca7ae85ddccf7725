fn main() {
    std::process::exit(krf_core::cli::run_cli(std::env::args_os()));
}
