fn main() {
    std::process::exit(upw::cli::run(std::env::args_os()));
}
