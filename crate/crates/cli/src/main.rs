use clap::Parser;

fn main() {
    let cli = sepconv_cli::Cli::parse();
    if let Err(err) = sepconv_cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
