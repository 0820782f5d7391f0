fn main() {
    std::process::exit(qmkv::cli::run_from_args(std::env::args_os()));
}
