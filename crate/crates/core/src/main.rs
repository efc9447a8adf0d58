fn main() {
    std::process::exit(dfdetect::cli::run(std::env::args_os()));
}
