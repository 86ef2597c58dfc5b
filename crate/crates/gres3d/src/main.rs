fn main() {
    std::process::exit(gres3d::cli::run(std::env::args()));
}
