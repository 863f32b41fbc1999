fn main() {
    std::process::exit(gpuq_cli::run(std::env::args_os()));
}
