fn main() {
    std::process::exit(occnet_cli::run(std::env::args_os()));
}
