//! Write a small pyramidal TIFF, reopen it and read regions from every level.
//!
//! cargo run --example read_slide [out_dir]

use tileforge::slide_io::open_slide;
use tileforge::synth::{write_synthetic_slide, SlideStyle};
use tileforge::ClassLabel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("tileforge-read-slide"), Into::into);
    std::fs::create_dir_all(&out)?;
    let path = out.join("demo.tiff");
    let style = SlideStyle::random(ClassLabel::NonProgressor, 2048, 1536, 7);
    write_synthetic_slide(&path, "DEMO", &style, 3, 256, 0.25)?;

    let slide = open_slide(&path)?;
    println!("{} ({:?} um/px)", slide.slide_id(), slide.mpp());
    for (i, level) in slide.levels().iter().enumerate() {
        let px = slide.read_region(i, 0, 0, 4.min(level.width), 1)?;
        println!("level {i}: {}x{} downsample {} first pixels {:?}", level.width, level.height, level.downsample, &px[..6]);
    }
    let centre = slide.read_region(0, 1000, 700, 64, 64)?;
    let mean = centre.iter().map(|&v| v as f64).sum::<f64>() / centre.len() as f64;
    println!("mean intensity of a 64x64 tissue patch: {mean:.1}");
    println!("level for a 200 px overview: {}", slide.best_level_for(200));
    Ok(())
}
