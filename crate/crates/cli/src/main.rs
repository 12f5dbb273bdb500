fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(csmri_cli::LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(csmri_cli::run(std::env::args_os()));
}
