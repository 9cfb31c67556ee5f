use clap::Parser;

fn main() {
    let cli = freqsv::cli::Cli::parse();
    match freqsv::cli::run(cli) {
        Ok(message) => println!("{message}"),
        Err(e) => {
            eprintln!("freqsv: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
