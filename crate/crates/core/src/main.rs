fn main() {
    std::process::exit(dscls::cli::run_from(std::env::args_os()));
}
