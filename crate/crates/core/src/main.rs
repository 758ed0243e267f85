fn main() {
    std::process::exit(prunesearch::cli::main_with_args(std::env::args_os()));
}
