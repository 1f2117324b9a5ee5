fn main() {
    std::process::exit(cgn_cli::main_cgn(std::env::args_os().collect()));
}
