use clap::Parser;

fn main() {
    let cli = dr1mask_cli::Cli::parse();
    std::process::exit(dr1mask_cli::run(cli));
}
