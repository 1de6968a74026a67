fn main() {
    std::process::exit(inhibitor::cli::run(std::env::args_os()));
}
