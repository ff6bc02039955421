fn main() {
    std::process::exit(emovec::cli::main_with_args());
}
