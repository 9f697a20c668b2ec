fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(convrt_core::cli::cli_main(&argv));
}
