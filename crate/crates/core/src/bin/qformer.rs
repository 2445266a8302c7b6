fn main() {
    std::process::exit(qformer::cli::main());
}
