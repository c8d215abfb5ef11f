//! Slide holdout, majority undersampling and stratified splitting on a
//! synthetic pool, with the provenance counts the manifest records.
//!
//! cargo run --example curate_dataset

use tileforge::dataset::{
    balance_undersample, holdout_slides, stratified_split, synthetic_entries, write_manifest, DatasetManifest, Split,
};
use tileforge::ClassLabel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 2024;
    let mut entries = synthetic_entries(ClassLabel::Progressor, 30, 400, "P");
    entries.extend(synthetic_entries(ClassLabel::NonProgressor, 40, 450, "N"));
    let m = DatasetManifest::from_entries(entries, seed);
    let m = holdout_slides(m, 10, seed)?;
    let m = balance_undersample(m, seed)?;
    let m = stratified_split(m, [0.70, 0.15, 0.15], seed)?;

    let p = &m.provenance;
    println!("curated        {} / {}", p.curated.progressor, p.curated.non_progressor);
    println!("held out       {} slides, {} tiles", p.heldout_slides.len(), p.heldout_tiles.total());
    println!("pre-balance    {} / {}", p.pre_balance.progressor, p.pre_balance.non_progressor);
    println!("post-balance   {} / {}", p.post_balance.progressor, p.post_balance.non_progressor);
    for split in [Split::Train, Split::Val, Split::Test, Split::HeldoutWsi, Split::Discarded] {
        println!("{:<14} {}", format!("{split:?}"), m.split_count(split));
    }
    let path = std::env::temp_dir().join("tileforge-manifest.jsonl");
    write_manifest(&path, &m)?;
    println!("manifest written to {}", path.display());
    Ok(())
}
