fn main() {
    std::process::exit(lede::cli::run(std::env::args_os()));
}
