fn main() {
    std::process::exit(mvsa::cli::run(std::env::args_os()));
}
