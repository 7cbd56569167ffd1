fn main() {
    std::process::exit(delay_control_cli::run(std::env::args_os()));
}
