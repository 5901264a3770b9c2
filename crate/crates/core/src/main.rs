fn main() {
    std::process::exit(bdil::cli::run(std::env::args()));
}
