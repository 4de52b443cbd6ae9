fn main() {
    std::process::exit(anchor_adapt::cli::run());
}
