fn main() {
    std::process::exit(ncs_core::cli::main_with_args(std::env::args_os()));
}
