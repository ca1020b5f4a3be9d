fn main() {
    std::process::exit(z2h::cli::run(std::env::args_os()));
}
