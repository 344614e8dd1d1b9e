use clap::Parser;

fn main() {
    let cli = fracsls_service::cli::Cli::parse();
    if let Err(e) = fracsls_service::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
