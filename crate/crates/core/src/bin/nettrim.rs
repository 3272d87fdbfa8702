fn main() {
    std::process::exit(nettrim::cli::run(std::env::args_os()));
}
