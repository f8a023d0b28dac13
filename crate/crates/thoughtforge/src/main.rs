use clap::Parser;
use thoughtforge::cli;

fn main() {
    let parsed = match cli::Cli::try_parse() {
        Ok(parsed) => parsed,
        Err(e) => {
            // clap exits with 2 by default; the exit-code contract
            // reserves 2 for data errors, so usage failures remap to 1.
            let code = if e.use_stderr() { cli::EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(failure) = cli::run(&parsed) {
        eprintln!("error: {}", failure.message);
        std::process::exit(failure.code);
    }
}
