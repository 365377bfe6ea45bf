fn main() {
    std::process::exit(cfvsr::cli::main());
}
