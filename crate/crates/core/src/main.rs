fn main() {
    std::process::exit(seqdeconf::experiments::cli_main(std::env::args_os()));
}
