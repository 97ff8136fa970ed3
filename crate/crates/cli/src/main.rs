fn main() {
    std::process::exit(vtcd_cli::run(std::env::args_os()));
}
