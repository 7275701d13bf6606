fn main() {
    std::process::exit(picosync::cli::run(std::env::args_os()));
}
