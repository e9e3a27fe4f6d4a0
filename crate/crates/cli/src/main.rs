fn main() {
    std::process::exit(routegan_cli::run(std::env::args_os()));
}
