fn main() {
    std::process::exit(stacklq::cli::run_from_env());
}
