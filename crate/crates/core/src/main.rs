use clap::Parser;
use openseg::cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(summary) => println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes")),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
