fn main() {
    std::process::exit(man_cli::run(std::env::args_os()));
}
