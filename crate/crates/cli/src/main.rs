fn main() {
    std::process::exit(consep_cli::run(std::env::args_os()));
}
