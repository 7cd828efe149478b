fn main() {
    std::process::exit(siamface_cli::run(std::env::args_os()));
}
