use clap::Parser;

fn main() {
    // Flag errors exit with code 2 via clap; runtime failures map to 1.
    let cli = facediff_cli::Cli::parse();
    if let Err(e) = facediff_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
