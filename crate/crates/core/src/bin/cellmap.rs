fn main() {
    std::process::exit(cellmap::cli::run(std::env::args_os()));
}
