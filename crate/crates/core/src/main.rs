use clap::Parser;
use escape_rate::cli::{execute, exit_code, Cli};

fn main() {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => print!("{}", out.summary),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
