fn main() {
    std::process::exit(character_adapter::cli::run(std::env::args_os()));
}
