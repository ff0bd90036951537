fn main() {
    std::process::exit(dcan::cli::run(std::env::args_os()));
}
