fn main() {
    std::process::exit(biomoe_cli::run(std::env::args_os()));
}
