fn main() {
    std::process::exit(reviewkd_cli::main_with(std::env::args_os()));
}
