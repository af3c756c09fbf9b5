use clap::Parser;
use markov_geometry_cli::args::Cli;
use markov_geometry_cli::error::exit;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MG_LOG_LEVEL", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let code = match markov_geometry_cli::execute(&cli) {
        Ok(_) => exit::OK,
        Err(e) => {
            eprintln!("mg: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
