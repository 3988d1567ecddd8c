fn main() {
    std::process::exit(rankcount_cli::dispatch(std::env::args_os()));
}
