fn main() {
    std::process::exit(binflow::cli::run(std::env::args_os()));
}
