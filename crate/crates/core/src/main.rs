fn main() {
    let code = ternary_spike::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
