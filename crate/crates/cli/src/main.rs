use clap::error::ErrorKind;
use clap::Parser;
use spatok_cli::run::{dispatch, Cli, EXIT_USAGE};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; anything else is a usage
            // error and must exit 1, not clap's default 2.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
