//! The whole pipeline on a small synthetic corpus: synth, tile, curate,
//! train, eval, then Grad-CAM for one held-out tile.
//!
//! cargo run --release --example end_to_end [out_dir]

use tileforge::dataset::Split;
use tileforge::pipeline::{cmd_synth, Outcome, Pipeline, RunOptions};
use tileforge::synth::SynthConfig;
use tileforge::config::PipelineConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("tileforge-e2e"), Into::into);
    let opts = RunOptions {
        quiet: true,
        ..RunOptions::default()
    };
    let synth = SynthConfig {
        slides_per_class: 8,
        ..SynthConfig::default()
    };
    let corpus = cmd_synth(&out, &synth, &opts)?;
    print!("{}", corpus.summary());
    let mut cfg = PipelineConfig::load(out.join("config.json"))?;
    cfg.dataset.heldout_per_class = 2;
    let p = Pipeline::new(cfg, opts)?;

    print!("{}", p.tile()?.summary());
    let curated = p.curate()?;
    print!("{}", curated.summary());
    print!("{}", p.train()?.summary());
    print!("{}", p.eval()?.summary());

    let manifest = curated.done().expect("not a dry run").manifest;
    let first = manifest.in_split(Split::HeldoutWsi).next().expect("held-out tiles");
    print!("{}", p.gradcam(&first.slide_id, &[(first.grid_x, first.grid_y)])?.summary());
    Ok(())
}
