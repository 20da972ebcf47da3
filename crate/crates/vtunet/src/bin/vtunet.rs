use clap::Parser;

fn main() {
    let cli = vtunet::cli::Cli::parse();
    if let Err(err) = vtunet::cli::run(cli) {
        let detail = err.to_string().replace('\n', " ");
        eprintln!("error: {}: {detail}", err.category());
        std::process::exit(1);
    }
}
