fn main() {
    std::process::exit(avqa::cli::run(std::env::args_os()));
}
