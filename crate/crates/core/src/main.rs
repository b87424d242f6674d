fn main() {
    std::process::exit(tensorstick::cli::run(std::env::args_os()));
}
