fn main() {
    std::process::exit(clwf::cli::run(std::env::args_os()));
}
