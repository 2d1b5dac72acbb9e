fn main() {
    std::process::exit(otreg::cli::run(std::env::args_os()));
}
