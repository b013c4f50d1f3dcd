fn main() {
    std::process::exit(lat::cli::run_from(std::env::args_os()));
}
