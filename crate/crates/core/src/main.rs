fn main() {
    std::process::exit(quadfit::cli::run(std::env::args_os()));
}
