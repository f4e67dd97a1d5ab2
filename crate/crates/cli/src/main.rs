fn main() {
    std::process::exit(trendlab_cli::run(std::env::args_os()));
}
