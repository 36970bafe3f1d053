fn main() {
    std::process::exit(permtpp::harness::cli::run(std::env::args_os()));
}
