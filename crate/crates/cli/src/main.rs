fn main() {
    std::process::exit(fsnas_cli::run());
}
