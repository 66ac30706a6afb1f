fn main() {
    fogline::cli::init_logging();
    std::process::exit(fogline::cli::main_with(std::env::args_os()));
}
