use clap::Parser;

fn main() {
    let cli = match ugpl::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes; anything else is usage
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ugpl::cli::EXIT_OK,
                _ => ugpl::cli::EXIT_USAGE,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(ugpl::cli::run(cli));
}
