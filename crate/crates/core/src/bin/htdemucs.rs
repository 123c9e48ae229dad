fn main() {
    std::process::exit(htdemucs::cli::run(std::env::args_os()));
}
