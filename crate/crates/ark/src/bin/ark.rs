fn main() {
    std::process::exit(ark::cli::run_cli(std::env::args()));
}
