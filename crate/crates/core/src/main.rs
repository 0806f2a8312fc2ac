fn main() {
    if let Err(e) = deslab::cli::run(std::env::args_os()) {
        eprintln!("{}", e.render());
        std::process::exit(e.exit_code());
    }
}
