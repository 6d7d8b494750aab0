fn main() {
    std::process::exit(rseed::cli::run(std::env::args_os()));
}
