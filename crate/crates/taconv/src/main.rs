fn main() {
    std::process::exit(taconv::cli::run(std::env::args_os()));
}
