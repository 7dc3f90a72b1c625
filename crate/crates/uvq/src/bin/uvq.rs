fn main() {
    std::process::exit(uvq::cli::main_with_args(std::env::args_os()));
}
