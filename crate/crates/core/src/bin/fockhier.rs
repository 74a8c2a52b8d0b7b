fn main() {
    std::process::exit(fockhier::cli::main_with_args(std::env::args_os()));
}
