fn main() {
    std::process::exit(sharpdiff::cli::run(std::env::args_os()));
}
