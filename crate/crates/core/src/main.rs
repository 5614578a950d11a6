fn main() {
    std::process::exit(tearflow::cli::main_with_args(std::env::args_os()));
}
