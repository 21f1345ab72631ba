fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(harnack_lab::cli::run_args(&args));
}
