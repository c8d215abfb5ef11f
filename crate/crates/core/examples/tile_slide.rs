//! Tile one annotated slide and tally the gate and QC outcomes.
//!
//! cargo run --example tile_slide

use std::collections::BTreeMap;

use tileforge::slide_io::SlideImage;
use tileforge::synth::SlideStyle;
use tileforge::tiler::{extract_all, SlideLabel, TilerParams};
use tileforge::ClassLabel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (w, h) = (1536, 1280);
    let style = SlideStyle::random(ClassLabel::Progressor, w, h, 11);
    let slide = SlideImage::from_planes("DEMO", vec![(w, h, style.region(0, 0, 0, w, h))])?;
    let params = TilerParams {
        tile_size: 128,
        out_size: 64,
        ..TilerParams::default()
    };
    let meta = SlideLabel {
        patient_id: "PT-1".into(),
        label: ClassLabel::Progressor,
    };
    let records = extract_all(&slide, &style.annotations(), &meta, &params)?;

    let mut outcome: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        let key = r.qc.reject_reason.map_or("kept".to_string(), |why| format!("{why:?}"));
        *outcome.entry(key).or_default() += 1;
    }
    println!("{} grid positions", records.len());
    for (k, n) in &outcome {
        println!("  {k:<12} {n}");
    }
    // a text map of the grid: '#' kept, 'x' excluded, '.' anything else
    let cols = w / params.tile_size;
    for row in records.chunks(cols as usize) {
        let line: String = row
            .iter()
            .map(|r| match (r.kept(), r.qc.reject_reason) {
                (true, _) => '#',
                (_, Some(tileforge::tiler::RejectReason::Excluded)) => 'x',
                _ => '.',
            })
            .collect();
        println!("  {line}");
    }
    Ok(())
}
