fn main() {
    std::process::exit(dclseg::cli::run_from(std::env::args_os()));
}
