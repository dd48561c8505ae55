fn main() {
    std::process::exit(textrestore_assist::cli::dispatch(std::env::args_os()));
}
