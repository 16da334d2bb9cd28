//! Regenerate `data/synthetic_corpus.csv` from the default synthetic config.

use std::fs::File;
use std::io::BufWriter;

use coopdrive_core::reference::corpus_path;
use coopdrive_core::tpm::{synthetic, write_trajectories};

fn main() -> coopdrive_core::Result<()> {
    let records = synthetic::generate(&synthetic::SyntheticConfig::default());
    let path = corpus_path();
    std::fs::create_dir_all(path.parent().unwrap())?;
    write_trajectories(BufWriter::new(File::create(&path)?), &records)?;
    println!("{} rows -> {}", records.len(), path.display());
    Ok(())
}
