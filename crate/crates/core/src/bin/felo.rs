fn main() {
    std::process::exit(felo::cli::main(std::env::args_os()));
}
