fn main() {
    std::process::exit(alset_core::cli::main_with_args(std::env::args_os()));
}
