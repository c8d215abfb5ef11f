//! Train the tile classifier on smooth versus fine-grained texture tiles,
//! then save and reload the checkpoint.
//!
//! cargo run --release --example train_classifier

use tileforge::augment::AugmentConfig;
use tileforge::nn::{
    evaluate, load_checkpoint, save_checkpoint, train, ModelSpec, ModelState, PhaseOne, PhaseTwo, TileSet, TrainSchedule,
};
use tileforge::synth::SlideStyle;
use tileforge::tiler::{resize_bilinear, Raster};
use tileforge::ClassLabel;

fn tiles(n: usize, seed: u64) -> TileSet {
    let mut set = TileSet::default();
    for i in 0..n {
        let label = if i % 2 == 0 { ClassLabel::Progressor } else { ClassLabel::NonProgressor };
        let style = SlideStyle::random(label, 1024, 1024, seed + i as u64);
        let raw = Raster::new(128, 128, style.region(0, 448, 448, 128, 128));
        set.push(resize_bilinear(&raw, 32, 32), label, seed + i as u64);
    }
    set
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::square(32, 8, 3);
    let mut model = ModelState::<f32>::new(spec.clone(), 1)?;
    let (train_set, val) = (tiles(160, 0), tiles(40, 10_000));
    let schedule = TrainSchedule {
        phase1: PhaseOne { epochs: 2, lr: 0.01 },
        phase2: PhaseTwo {
            epochs: 16,
            lr0: 1e-3,
            gamma: 0.9,
        },
        ..TrainSchedule::default()
    };
    println!("{} parameters", model.param_count());
    let outcome = train(&mut model, &train_set, &val, &AugmentConfig::default(), &schedule)?;
    for r in &outcome.history {
        println!(
            "epoch {:>2} {:?} lr {:.1e}: train {:.4} val {:.4} acc {:.3}",
            r.epoch, r.phase, r.lr, r.train_loss, r.val_loss, r.val_accuracy
        );
    }
    let path = std::env::temp_dir().join("tileforge-example.tfck");
    save_checkpoint(&model, &path)?;
    let restored = load_checkpoint(&path, &spec)?;
    println!("reloaded checkpoint: val (loss, acc) = {:?}", evaluate(&restored, &val)?);
    Ok(())
}
