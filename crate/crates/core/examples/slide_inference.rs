//! Slide-level aggregation: mean tile probability, thresholded decision,
//! histogram CSV and a heatmap over a thumbnail.
//!
//! cargo run --example slide_inference [out_dir]

use tileforge::inference::{aggregate, heatmap_grid, TileProb};
use tileforge::report::{render_histogram, render_slide_heatmap, write_png};
use tileforge::tiler::Raster;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("tileforge-inference"), Into::into);
    std::fs::create_dir_all(&out)?;
    let (tx, ty) = (12u32, 8u32);
    // probabilities rise from left to right; the corners hold no tissue
    let tiles: Vec<TileProb> = (0..ty)
        .flat_map(|y| (0..tx).map(move |x| (x, y)))
        .filter(|&(x, y)| !((x == 0 || x == tx - 1) && (y == 0 || y == ty - 1)))
        .map(|(x, y)| TileProb {
            grid_x: x,
            grid_y: y,
            prob: ((x as f64 + 0.5) / tx as f64).powf(0.8),
        })
        .collect();
    let report = aggregate("DEMO", (tx, ty), tiles, None, 0.5)?;
    println!(
        "{} tiles, mean p {:.4} -> {:?}",
        report.tiles.len(),
        report.mean_prob,
        report.decision
    );
    print!("{}", render_histogram(&report.histogram));

    let cell = 16;
    let thumb = Raster::filled(tx * cell, ty * cell, [236, 200, 220]);
    let heat = render_slide_heatmap(&thumb, &heatmap_grid(&report, (tx, ty))?)?;
    let path = out.join("heatmap.png");
    write_png(&path, &heat)?;
    println!("heatmap written to {}", path.display());
    Ok(())
}
