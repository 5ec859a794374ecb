use clap::error::ErrorKind;
use clap::Parser;
use stemforge_cli::{run, Cli, CliError};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STEMFORGE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            eprint!("{}", e.render());
            fail(CliError::Usage(e.kind().to_string()))
        }
    };
    if let Err(e) = run(cli) {
        fail(e)
    }
}

fn fail(e: CliError) -> ! {
    eprintln!("{}", e.line());
    std::process::exit(e.exit_code())
}
