fn main() {
    std::process::exit(nh2st::cli::run(std::env::args_os()));
}
