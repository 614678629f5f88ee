fn main() {
    std::process::exit(sdc::cli::main_with_args(std::env::args_os()));
}
