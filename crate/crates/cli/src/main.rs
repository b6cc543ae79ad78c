fn main() {
    std::process::exit(afpnet_cli::dispatch(std::env::args_os()));
}
