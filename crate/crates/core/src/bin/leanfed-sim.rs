fn main() {
    std::process::exit(leanfed_sim::cli::main_with_args(std::env::args_os()));
}
