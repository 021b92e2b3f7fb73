fn main() {
    std::process::exit(etr::cli::run(std::env::args_os()));
}
