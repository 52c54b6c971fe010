use clap::Parser;

fn main() {
    let cli = atomlens::cli::Cli::parse();
    if let Err(e) = atomlens::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
