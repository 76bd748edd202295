fn main() {
    std::process::exit(attn_scalpel::cli::main_with_args(std::env::args_os()));
}
