fn main() {
    std::process::exit(crispe::cli::run(std::env::args_os()));
}
