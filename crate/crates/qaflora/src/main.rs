fn main() {
    std::process::exit(qaflora::cli::run(std::env::args_os()));
}
