fn main() {
    std::process::exit(el_bench::cli_dispatch(std::env::args_os()));
}
