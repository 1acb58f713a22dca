use clap::Parser;
use log::LevelFilter;

use coagsed::cli::{main_with, Cli};

fn main() {
    let level = match std::env::var("COAG_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Error,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    std::process::exit(main_with(Cli::parse()));
}
