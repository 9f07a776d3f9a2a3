fn main() {
    std::process::exit(comfusion_core::cli::run(std::env::args_os()));
}
