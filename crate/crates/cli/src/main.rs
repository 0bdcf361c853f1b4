fn main() {
    std::process::exit(dualcurr_cli::main_with_args(std::env::args_os()));
}
