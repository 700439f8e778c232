fn main() {
    std::process::exit(mmreg::cli::run(std::env::args_os()));
}
