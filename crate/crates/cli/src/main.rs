fn main() {
    std::process::exit(leignn_cli::dispatch(std::env::args_os()));
}
