fn main() {
    std::process::exit(depthmark::cli::run(std::env::args_os()));
}
