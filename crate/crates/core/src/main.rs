fn main() {
    std::process::exit(collapse_core::cli::run(std::env::args_os()));
}
