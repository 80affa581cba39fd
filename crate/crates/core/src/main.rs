fn main() {
    std::process::exit(valprop::harness::cli(std::env::args_os()));
}
