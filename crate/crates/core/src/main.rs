fn main() {
    std::process::exit(sentispan::cli::main_with_args(std::env::args_os()));
}
