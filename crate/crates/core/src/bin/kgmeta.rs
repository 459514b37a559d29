fn main() {
    std::process::exit(kgmeta::cli::run(std::env::args_os()));
}
