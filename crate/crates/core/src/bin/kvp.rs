fn main() {
    std::process::exit(kvp_core::cli::run(std::env::args_os()));
}
