fn main() {
    std::process::exit(attnlab::cli::dispatch(std::env::args_os()));
}
