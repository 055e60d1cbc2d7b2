fn main() {
    std::process::exit(stagevar_cli::run(std::env::args_os()));
}
