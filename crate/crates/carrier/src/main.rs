fn main() {
    std::process::exit(carrier::cli::main_with_args(std::env::args_os()));
}
