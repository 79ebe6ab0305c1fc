fn main() {
    std::process::exit(hrstnet::cli::run_from_args(std::env::args_os()));
}
