fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIEVE_LOG", "error")).init();
    std::process::exit(sieve_cli::run(std::env::args_os()));
}
