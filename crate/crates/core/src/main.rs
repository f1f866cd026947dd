fn main() {
    std::process::exit(byte_kge::cli::run(std::env::args_os()));
}
