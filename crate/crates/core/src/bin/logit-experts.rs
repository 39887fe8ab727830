fn main() {
    std::process::exit(logit_experts::cli::run(std::env::args_os()));
}
