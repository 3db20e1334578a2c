fn main() {
    std::process::exit(gllod::cli::dispatch(std::env::args_os()));
}
