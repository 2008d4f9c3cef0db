use clap::Parser;

fn main() {
    // Usage errors exit with code 2 via clap; --help/--version with 0.
    let cli = rotvae_cli::Cli::parse();
    if let Err(e) = rotvae_cli::execute(cli) {
        eprintln!("error: {}: {e}", e.class());
        std::process::exit(1);
    }
}
