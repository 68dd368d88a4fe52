fn main() {
    std::process::exit(mmfas_cli::run());
}
