fn main() {
    std::process::exit(pnec::cli::run(std::env::args_os()));
}
