fn main() {
    std::process::exit(diffaug::cli::run_cli(std::env::args()));
}
