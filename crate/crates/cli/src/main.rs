fn main() {
    std::process::exit(noise2sim_cli::run(std::env::args_os()));
}
