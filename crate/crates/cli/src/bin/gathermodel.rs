fn main() {
    std::process::exit(cgn_cli::main_gathermodel(std::env::args_os().collect()));
}
