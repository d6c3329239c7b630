fn main() {
    std::process::exit(ltv_core::cli::run(std::env::args_os()));
}
