use clap::Parser;

fn main() {
    let cli = custcap_cli::Cli::parse();
    if let Err(e) = custcap_cli::run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
