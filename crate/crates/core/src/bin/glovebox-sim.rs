fn main() {
    std::process::exit(glovebox_core::cli::main_with_args(std::env::args_os()));
}
