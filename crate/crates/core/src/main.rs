fn main() {
    std::process::exit(lbe::cli::run(std::env::args_os()));
}
