fn main() {
    std::process::exit(taskprune_cli::run(std::env::args_os()));
}
