fn main() {
    std::process::exit(sgfield::cli::main_with(std::env::args_os()));
}
