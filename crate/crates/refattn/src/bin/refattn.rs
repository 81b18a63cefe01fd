fn main() {
    std::process::exit(refattn::cli::run(std::env::args_os()));
}
