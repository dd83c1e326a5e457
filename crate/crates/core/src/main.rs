fn main() {
    std::process::exit(drgee::cli::run(std::env::args_os()));
}
