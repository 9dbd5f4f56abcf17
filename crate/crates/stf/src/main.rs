fn main() {
    std::process::exit(stf::cli::main_with_args(std::env::args_os()));
}
