fn main() {
    std::process::exit(lesionsynth_cli::run_command(std::env::args_os()));
}
