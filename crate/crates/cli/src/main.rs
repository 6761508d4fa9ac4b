fn main() {
    std::process::exit(iwkrr_cli::run(std::env::args_os()));
}
