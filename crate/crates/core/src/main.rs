fn main() {
    std::process::exit(mvtta::cli::run(std::env::args_os()));
}
