fn main() {
    std::process::exit(fpc_core::cli::run(std::env::args_os()));
}
