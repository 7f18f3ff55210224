fn main() {
    std::process::exit(privpool::cli::main_with_args(std::env::args_os()));
}
