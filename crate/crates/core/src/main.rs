fn main() {
    std::process::exit(sirlab::cli::main_with_args(std::env::args_os()));
}
