fn main() {
    std::process::exit(stereodepth_cli::run(std::env::args_os()));
}
