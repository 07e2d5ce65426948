fn main() {
    std::process::exit(cohar_cli::run(std::env::args_os()));
}
