fn main() {
    std::process::exit(bbench::cli::cli_main(std::env::args_os()));
}
