fn main() {
    std::process::exit(ising_stmdp::cli::run_from_env());
}
