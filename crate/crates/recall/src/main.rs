fn main() {
    std::process::exit(recall::cli::cli_run(std::env::args()));
}
