fn main() {
    std::process::exit(modelfuse::run(std::env::args()));
}
