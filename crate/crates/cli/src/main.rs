fn main() {
    std::process::exit(ctxdiff_cli::run(std::env::args_os()));
}
