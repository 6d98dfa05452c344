use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = rescreen_cli::commands::Cli::parse();
    std::process::exit(rescreen_cli::commands::run(cli));
}
