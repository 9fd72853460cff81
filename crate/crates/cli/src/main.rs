fn main() {
    std::process::exit(airwayseg_cli::run(std::env::args_os()));
}
