fn main() {
    std::process::exit(trikd::cli::run(std::env::args_os()));
}
