fn main() {
    std::process::exit(qfix::cli::main_with_args(std::env::args_os()));
}
