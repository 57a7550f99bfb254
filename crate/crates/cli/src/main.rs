fn main() {
    std::process::exit(slom_cli::run(std::env::args_os()));
}
