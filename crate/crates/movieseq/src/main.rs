fn main() {
    std::process::exit(movieseq::harness::cli::main_with_args(std::env::args_os()));
}
