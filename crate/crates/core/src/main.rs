fn main() {
    std::process::exit(optlab::cli::main_with_args(std::env::args_os()));
}
