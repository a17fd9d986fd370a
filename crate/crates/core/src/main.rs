fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp_millis()
        .init();
    std::process::exit(shardbatch::cli::run(std::env::args_os()));
}
