fn main() {
    std::process::exit(logan_core::cli::run(std::env::args_os()));
}
