fn main() {
    std::process::exit(barrenlab_cli::run(std::env::args().collect()));
}
