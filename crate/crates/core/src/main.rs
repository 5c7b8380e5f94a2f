fn main() {
    std::process::exit(hum_core::cli::run(std::env::args_os()));
}
