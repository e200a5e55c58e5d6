fn main() {
    std::process::exit(multifit::run());
}
