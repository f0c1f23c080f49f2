fn main() {
    std::process::exit(hpgan_cli::run(std::env::args_os()));
}
