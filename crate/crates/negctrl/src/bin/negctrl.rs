fn main() {
    std::process::exit(negctrl::cli::run(std::env::args_os()));
}
