fn main() {
    std::process::exit(rcf::cli::run(std::env::args_os()));
}
