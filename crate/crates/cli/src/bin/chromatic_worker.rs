//! Reference implementation of the external segmenter protocol.
//!
//! Usage: `chromatic-worker <batch_dir>`.
//! Reads `<batch_dir>/batch.json`, labels each item's 20× patch by nearest
//! palette color, and writes `<batch_dir>/out/<id>.png`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use necroscope::palette::Palette;
use necroscope::segmenter::{BatchFile, BATCH_FILE};
use necroscope::slide_store::load_rgb_png;
use necroscope::LabelMask;

#[derive(Parser)]
#[command(name = "chromatic-worker", about = "Nearest-color segmenter speaking the batch protocol")]
struct Args {
    batch_dir: PathBuf,
}

fn run(args: &Args) -> Result<(), String> {
    let batch_path = args.batch_dir.join(BATCH_FILE);
    let text = std::fs::read_to_string(&batch_path).map_err(|e| format!("{}: {e}", batch_path.display()))?;
    let batch: BatchFile = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", batch_path.display()))?;
    let palette = Palette::canonical();
    for item in &batch.items {
        let img = load_rgb_png(&args.batch_dir.join(&item.p20)).map_err(|e| e.to_string())?;
        let codes = img.pixels().map(|p| palette.nearest(p.0).code()).collect();
        let mask = LabelMask::from_codes(img.width(), img.height(), codes).map_err(|e| e.to_string())?;
        mask.save_png(&args.batch_dir.join("out").join(format!("{}.png", item.id)))
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("chromatic-worker: {e}");
            ExitCode::FAILURE
        }
    }
}
