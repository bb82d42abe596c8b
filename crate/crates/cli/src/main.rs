fn main() {
    std::process::exit(fracadapt_cli::run_cli(std::env::args_os()));
}
