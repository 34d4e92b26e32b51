fn main() {
    std::process::exit(dmsva_cli::run(std::env::args()));
}
