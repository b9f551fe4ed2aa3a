fn main() {
    std::process::exit(sovmas::cli::main());
}
