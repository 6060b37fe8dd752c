fn main() {
    std::process::exit(machine_jnd_cli::dispatch(std::env::args_os()));
}
