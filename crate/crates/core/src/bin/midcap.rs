fn main() {
    std::process::exit(midcap_neutral::cli::run(std::env::args_os()));
}
