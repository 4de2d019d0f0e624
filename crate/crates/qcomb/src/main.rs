fn main() {
    if let Err(e) = qcomb::init_threads() {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
    std::process::exit(qcomb::cli::main_with_args(std::env::args_os()));
}
