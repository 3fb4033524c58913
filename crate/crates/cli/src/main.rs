use clap::Parser;

fn main() {
    let cli = pwa_mrac_cli::Cli::parse();
    let code = pwa_mrac_cli::execute(cli, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
