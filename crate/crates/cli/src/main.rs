fn main() {
    std::process::exit(mshift_cli::run(std::env::args_os()));
}
