fn main() {
    std::process::exit(logodet::cli::run(std::env::args_os()));
}
