//! Writes the synthetic VGG-19 weight bundle used when no pretrained
//! bundle is supplied.

use std::path::PathBuf;

use clap::Parser;
use swtex_core::vgg::{synthetic_vgg19, SYNTHETIC_SEED};

#[derive(Parser)]
#[command(name = "swtex-weights", about = "Write the synthetic VGG-19 SWTXW bundle")]
struct Args {
    /// Output bundle path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SYNTHETIC_SEED)]
    seed: u64,
}

fn main() {
    let args = Args::parse();
    let bundle = synthetic_vgg19(args.seed);
    if let Err(e) = bundle.save(&args.out) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
    println!("{} crc32={:08x}", args.out.display(), bundle.payload_crc32());
}
