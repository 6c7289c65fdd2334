use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = rad::cli::Cli::parse();
    let stdin = std::io::stdin();
    let code = match rad::cli::run(cli, &mut stdin.lock(), &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            rad::cli::exit_code(&e)
        }
    };
    std::process::exit(code);
}
