fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("EIARAG_LOG").unwrap_or_else(|_| "warn".into()))
        .init();
    std::process::exit(eiarag_cli::run(std::env::args_os()));
}
