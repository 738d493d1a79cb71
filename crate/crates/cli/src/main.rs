use clap::Parser;
use gaterag_cli::{error_line, execute, exit_code, Cli};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let env = |name: &str| std::env::var(name).ok();
    if let Err(e) = execute(cli, &env, &mut std::io::stdout()) {
        eprintln!("{}", error_line(&e));
        std::process::exit(exit_code(e.category()));
    }
}
