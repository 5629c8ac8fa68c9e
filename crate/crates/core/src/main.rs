fn main() {
    std::process::exit(detrame::cli::run_command(std::env::args_os()));
}
