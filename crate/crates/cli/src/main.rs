fn main() {
    std::process::exit(bmolab_cli::main_with(std::env::args_os()));
}
