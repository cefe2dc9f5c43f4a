use clap::Parser;

fn main() {
    let cli = partseg::cli::Cli::parse();
    if let Err(e) = partseg::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
