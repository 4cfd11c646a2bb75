fn main() {
    std::process::exit(dcca_core::cli::run());
}
