fn main() {
    std::process::exit(genolm::cli::run(std::env::args_os()));
}
