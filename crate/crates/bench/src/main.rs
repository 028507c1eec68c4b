fn main() {
    std::process::exit(mbcf_bench::cli::main_with_args(std::env::args_os()));
}
