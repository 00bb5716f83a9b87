fn main() {
    std::process::exit(fieldcast::cli::run(std::env::args_os()));
}
