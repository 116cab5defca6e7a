fn main() {
    if let Err(e) = lobsurv_cli::run(std::env::args_os()) {
        eprintln!("{}", e.diagnostic());
        std::process::exit(e.exit_code());
    }
}
