use clap::Parser;

fn main() {
    let cli = cotlab::cli::Cli::parse();
    if let Err(e) = cotlab::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
