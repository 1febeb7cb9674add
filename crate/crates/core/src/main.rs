fn main() {
    std::process::exit(wepsam::cli::run(std::env::args_os()));
}
