fn main() {
    std::process::exit(firmconv::run_cli());
}
