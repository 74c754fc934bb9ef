fn main() {
    std::process::exit(histmatch::cli::run(std::env::args_os()));
}
