fn main() {
    std::process::exit(mlboot::cli::main_with(std::env::args()));
}
