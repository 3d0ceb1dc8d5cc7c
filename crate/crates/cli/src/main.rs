use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match sdtm_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr());
    match sdtm_cli::execute(&cli, &mut out, &mut err) {
        Ok(()) | Err(sdtm_cli::CliError::StdoutClosed) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
