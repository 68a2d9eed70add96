fn main() {
    std::process::exit(xlsor::cli::run(std::env::args_os()));
}
