fn main() {
    std::process::exit(codec_audit::cli::run(std::env::args_os()));
}
