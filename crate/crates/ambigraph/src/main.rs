fn main() {
    std::process::exit(ambigraph::cli::run());
}
