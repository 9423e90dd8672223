use clap::Parser;

fn main() {
    let cli = coherent_cli::Cli::parse();
    if let Err(e) = coherent_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
