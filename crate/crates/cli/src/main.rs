fn main() {
    std::process::exit(vidtok_cli::run(std::env::args_os()));
}
