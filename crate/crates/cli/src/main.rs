use clap::Parser;

fn main() {
    let cli = symabs_cli::Cli::parse();
    std::process::exit(symabs_cli::main_with(&cli));
}
