fn main() {
    std::process::exit(mcgm::cli::run(std::env::args_os()));
}
