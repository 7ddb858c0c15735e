fn main() {
    std::process::exit(pathrec_cli::run());
}
