fn main() {
    std::process::exit(quadmask_cli::run(std::env::args_os()));
}
