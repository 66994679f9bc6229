fn main() {
    std::process::exit(tryon_dit::cli::main_with_args(std::env::args_os()));
}
