fn main() {
    std::process::exit(canet::cli::main_with(std::env::args().collect()));
}
