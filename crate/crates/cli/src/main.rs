fn main() {
    std::process::exit(bnml_cli::run(std::env::args_os()));
}
