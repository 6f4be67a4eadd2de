fn main() {
    std::process::exit(detxai::cli::main_with(std::env::args_os()));
}
