fn main() {
    std::process::exit(trackhijack_cli::run_cli(std::env::args_os()));
}
