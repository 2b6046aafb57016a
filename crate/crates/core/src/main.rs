fn main() {
    std::process::exit(lqo_cp::cli::main_with_args(std::env::args_os()));
}
