use clap::Parser;
use thermoforge_cli::commands::{run, Cli};
use thermoforge_cli::errors::render;

fn main() {
    if let Some(threads) = std::env::var("THERMOFORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(Cli::parse()) {
        Ok(summary) => println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes")),
        Err(e) => {
            let (line, code) = render(&e);
            eprintln!("{line}");
            std::process::exit(code);
        }
    }
}
