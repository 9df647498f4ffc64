fn main() {
    std::process::exit(windvr::cli::run(std::env::args_os()));
}
