fn main() {
    std::process::exit(tadalab_cli::run(std::env::args_os()));
}
