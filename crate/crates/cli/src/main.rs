fn main() {
    std::process::exit(lattice_llr_cli::run(std::env::args_os()));
}
