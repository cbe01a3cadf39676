use clap::Parser;

fn main() {
    let cli = cbo::cli::Cli::parse();
    if let Err(err) = cbo::cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
