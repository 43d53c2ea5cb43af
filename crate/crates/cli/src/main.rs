fn main() {
    std::process::exit(dse_cli::run(std::env::args_os()));
}
