fn main() {
    std::process::exit(icc::cli::run(std::env::args_os()));
}
