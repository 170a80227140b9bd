use clap::Parser;

fn main() {
    let cli = worldkit_cli::Cli::parse();
    match worldkit_cli::run(&cli) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            eprintln!("worldkit: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
