fn main() {
    std::process::exit(gridshed::cli::run(std::env::args_os()));
}
