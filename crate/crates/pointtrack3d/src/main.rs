fn main() {
    std::process::exit(pointtrack3d::cli::run(std::env::args().collect()));
}
