//! Grad-CAM for one tile: a briefly trained model, the coarse map, its
//! normalization and the colour overlay written as PNG.
//!
//! cargo run --release --example gradcam_overlay [out_dir]

use tileforge::augment::AugmentConfig;
use tileforge::gradcam::{gradcam, overlay, DEFAULT_ALPHA};
use tileforge::nn::{train, ModelSpec, ModelState, TileSet, TrainSchedule};
use tileforge::report::write_png;
use tileforge::synth::SlideStyle;
use tileforge::tiler::{resize_bilinear, Raster};
use tileforge::ClassLabel;

fn tile_of(style: &SlideStyle, x: u32, y: u32) -> Raster {
    resize_bilinear(&Raster::new(128, 128, style.region(0, x, y, 128, 128)), 64, 64)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("tileforge-gradcam"), Into::into);
    std::fs::create_dir_all(&out)?;

    let mut set = TileSet::default();
    for i in 0..120u64 {
        let label = if i % 2 == 0 { ClassLabel::Progressor } else { ClassLabel::NonProgressor };
        let style = SlideStyle::random(label, 1024, 1024, 100 + i);
        set.push(tile_of(&style, 448, 448), label, i);
    }
    let mut model = ModelState::<f32>::new(ModelSpec::square(64, 8, 4), 3)?;
    train(&mut model, &set, &set, &AugmentConfig::default(), &TrainSchedule::default())?;

    // a tile near the left edge of the tissue
    let style = SlideStyle::random(ClassLabel::Progressor, 1024, 1024, 7);
    let [cx, _, rx, _] = style.ellipse;
    let tile = tile_of(&style, (cx - rx) as u32 - 64, 448);
    let map = gradcam(&model, &tile)?;
    println!("map {}x{}, logit {:.4}", map.height, map.width, map.logit);
    for row in map.normalized.chunks(map.width) {
        println!("  {}", row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
    }
    let path = out.join("overlay.png");
    write_png(&path, &overlay(&tile, &map, DEFAULT_ALPHA)?)?;
    println!("overlay written to {}", path.display());
    Ok(())
}
