fn main() {
    std::process::exit(grenol::cli::dispatch(std::env::args_os()));
}
