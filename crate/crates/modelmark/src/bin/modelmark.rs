fn main() {
    std::process::exit(modelmark::cli::run());
}
