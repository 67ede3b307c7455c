fn main() {
    std::process::exit(kala_core::cli::run(std::env::args_os()));
}
