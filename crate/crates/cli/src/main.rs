use clap::Parser;

fn main() {
    let cli = dqtrade_cli::Cli::parse();
    match dqtrade_cli::run(cli) {
        Ok(written) => {
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Err(err) => {
            let message = format!("{err:#}");
            eprintln!("error: {}", message.split_whitespace().collect::<Vec<_>>().join(" "));
            std::process::exit(dqtrade_cli::exit_code(&err));
        }
    }
}
