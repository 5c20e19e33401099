fn main() {
    std::process::exit(gridloss::cli::main_with_args(std::env::args_os()));
}
