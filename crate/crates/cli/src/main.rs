fn main() {
    std::process::exit(mafqi_cli::main_with_args(std::env::args_os()));
}
