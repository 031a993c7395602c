fn main() {
    std::process::exit(lace_cli::run(std::env::args_os()));
}
