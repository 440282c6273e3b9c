fn main() {
    std::process::exit(jpdvt::cli::main_with_args(std::env::args_os()));
}
