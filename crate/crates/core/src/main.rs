fn main() {
    std::process::exit(structcfn::cli::main());
}
