use clap::Parser;
use hsa::cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(out) => println!("{}", out.summary),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
