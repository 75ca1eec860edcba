fn main() {
    std::process::exit(come::cli::parse_and_dispatch(std::env::args_os()));
}
