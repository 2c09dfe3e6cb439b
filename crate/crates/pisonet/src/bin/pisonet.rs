fn main() {
    std::process::exit(pisonet::cli_main());
}
