fn main() {
    std::process::exit(ttt4rec::cli::run(std::env::args_os()));
}
