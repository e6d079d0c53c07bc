fn main() {
    naa_cli::init_logging();
    let code = naa_cli::run_cli(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
