fn main() {
    std::process::exit(wps_cli::run_cli(std::env::args_os()));
}
