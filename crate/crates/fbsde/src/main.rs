fn main() { std::process::exit(fbsde::cli::run_cli(std::env::args_os())); }
