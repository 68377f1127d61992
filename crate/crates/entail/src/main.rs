fn main() {
    std::process::exit(entail::run_cli());
}
