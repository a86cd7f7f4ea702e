fn main() {
    std::process::exit(clonegrade_cli::run(std::env::args_os()));
}
