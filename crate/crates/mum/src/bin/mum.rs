fn main() {
    std::process::exit(mum::cli::run(std::env::args()));
}
