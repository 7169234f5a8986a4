fn main() {
    std::process::exit(ebci::cli::run(std::env::args_os()));
}
