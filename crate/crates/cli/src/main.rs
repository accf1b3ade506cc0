use clap::Parser;

fn main() {
    let cli = pfgen_cli::Cli::parse();
    if let Err(e) = pfgen_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
