fn main() {
    std::process::exit(diffnas::cli::run(std::env::args_os()));
}
