fn main() {
    std::process::exit(cgn_cli::main_single::<cgn_cli::proxy_cmd::GatherdArgs>(std::env::args_os().collect()));
}
