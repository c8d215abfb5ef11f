//! Seeded augmentation: the same (seed, epoch, tile) always gives the same
//! tile, and each epoch draws a new variation.
//!
//! cargo run --example augment_tiles

use tileforge::augment::{augment_tile, AugmentConfig};
use tileforge::synth::SlideStyle;
use tileforge::tiler::Raster;
use tileforge::ClassLabel;

fn mean_rgb(t: &Raster) -> [f64; 3] {
    let (mean, _) = t.channel_stats();
    mean
}

fn main() {
    let style = SlideStyle::random(ClassLabel::NonProgressor, 512, 512, 3);
    let tile = Raster::new(64, 64, style.region(0, 224, 224, 64, 64));
    let cfg = AugmentConfig {
        master_seed: 42,
        ..AugmentConfig::default()
    };
    println!("original      mean rgb {:.1?}", mean_rgb(&tile));
    for epoch in 0..5 {
        let a = augment_tile(&tile, &cfg, epoch, 17);
        let again = augment_tile(&tile, &cfg, epoch, 17);
        assert_eq!(a, again);
        println!("epoch {epoch}       mean rgb {:.1?}", mean_rgb(&a));
    }
    let off = augment_tile(&tile, &AugmentConfig::disabled(), 0, 17);
    println!("disabled config leaves the tile unchanged: {}", off == tile);
}
