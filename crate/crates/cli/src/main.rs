fn main() {
    std::process::exit(sadi_cli::run(std::env::args_os()));
}
