//! Shared fixtures for the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tileforge::dataset::PatientRecord;
use tileforge::nn::{bce_with_logits, ModelSpec, ModelState, Tensor};
use tileforge::pipeline::{cmd_synth, EvalOutcome, Pipeline, RunOptions};
use tileforge::synth::SynthConfig;
use tileforge::ClassLabel;

pub fn quiet() -> RunOptions {
    RunOptions {
        quiet: true,
        ..RunOptions::default()
    }
}

/// Result of comparing analytic f32 gradients with f64 central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub spec: ModelSpec,
    pub training: bool,
    /// Largest per-tensor `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// One random tiny network, batch and label vector. Odd seeds also
/// exercise dropout by replaying the same mask in every evaluation.
pub fn fd_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFD00 + seed);
    let input = [8usize, 12, 16][rng.gen_range(0..3)];
    let blocks = if input >= 12 { rng.gen_range(1..=2) } else { 1 };
    let spec = ModelSpec::square(input, rng.gen_range(2..=4), blocks);
    let mut model = ModelState::<f32>::new(spec.clone(), seed).unwrap();
    let shapes = spec.param_shapes();
    for (p, (name, _)) in model.params.iter_mut().zip(&shapes) {
        if name.ends_with("bias") {
            p.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    let n = rng.gen_range(1..=3);
    let len = n * input * input * 3;
    let x: Vec<f32> = (0..len).map(|_| rng.gen::<f32>()).collect();
    let labels: Vec<f32> = (0..n).map(|i| (i % 2) as f32).collect();
    let training = seed % 2 == 1;

    let reference = model.cast::<f64>();
    let batch = Tensor::new(vec![n, input, input, 3], x.clone()).unwrap();
    let fwd = model.forward(&batch, training).unwrap();
    let dz = bce_with_logits(&fwd.logits, &labels).grad;
    let grads = model.backward(&fwd.cache, &dz).unwrap();

    let batch64 = Tensor::new(vec![n, input, input, 3], x.iter().map(|&v| v as f64).collect()).unwrap();
    let labels64: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
    let loss = |m: &ModelState<f64>| -> f64 {
        let mut m = m.clone();
        let logits = m.forward(&batch64, training).unwrap().logits;
        bce_with_logits(&logits, &labels64).loss
    };
    let h = 1e-6;
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    let mut checked = 0;
    for (t, (name, _)) in shapes.iter().enumerate() {
        let analytic = grads.tensors[t].as_ref().expect("nothing frozen");
        let mut diff2 = 0.0;
        let (mut a2, mut n2) = (0.0, 0.0);
        for i in 0..analytic.len() {
            let mut plus = reference.clone();
            plus.params[t][i] += h;
            let mut minus = reference.clone();
            minus.params[t][i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic[i] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            checked += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 };
        if rel > max_rel {
            max_rel = rel;
            worst = name.clone();
        }
    }
    FdReport {
        spec,
        training,
        max_rel,
        worst,
        checked,
    }
}

/// Two reference cohorts whose per-patient rows reproduce known summary figures.
pub fn reference_cohorts() -> Vec<PatientRecord> {
    let mut out = Vec::new();
    let mut push = |cohort, i: usize, age, b, days| {
        let tag = if cohort == ClassLabel::Progressor { "P" } else { "N" };
        out.push(PatientRecord {
            patient_id: format!("{tag}{i:02}"),
            cohort,
            age_years: age,
            n_biopsies: b,
            screening_interval_days: days,
        })
    };
    // progressors: 32 patients, 21 with a single screening event (interval 0)
    let p_ages = [
        54, 58, 61, 63, 66, 68, 70, 71, 72, 74, 75, 76, 77, 78, 78, 79, 79, 80, 81, 82, 83, 84, 85, 86, 87, 88, 89, 90, 91,
        92, 94, 95,
    ];
    let p_biopsies = [1; 21].into_iter().chain([3; 7]).chain([2; 4]);
    // eleven repeat-screened progressors share 27,616 days
    let p_days = [0; 21]
        .into_iter()
        .chain([2110, 2910, 2310, 2710, 2460, 2560, 1980, 3040, 2500, 2520, 2516]);
    for (i, ((age, b), d)) in p_ages.into_iter().zip(p_biopsies).zip(p_days).enumerate() {
        push(ClassLabel::Progressor, i, age, b, d);
    }
    // non-progressors: 22 patients, all screened at least twice
    let n_ages = [54, 57, 59, 61, 62, 64, 65, 66, 67, 68, 69, 69, 70, 71, 72, 73, 74, 75, 76, 77, 78, 79];
    let n_biopsies = [2; 15].into_iter().chain([3; 7]);
    // 22 intervals summing to 36,498 days
    let n_days = (0..22).map(|i: u32| if i.is_multiple_of(2) { 1659 - 30 * i } else { 1659 + 30 * (i - 1) });
    for (i, ((age, b), d)) in n_ages.into_iter().zip(n_biopsies).zip(n_days).enumerate() {
        push(ClassLabel::NonProgressor, i, age, b, d);
    }
    out
}

/// Artifacts of one synthetic tile -> curate -> train -> eval run.
pub struct SyntheticRun {
    pub root: PathBuf,
    pub run_dir: PathBuf,
    pub tile_store: PathBuf,
    pub eval: EvalOutcome,
}

pub fn synthetic_run(root: &Path, seed: u64) -> SyntheticRun {
    let opts = RunOptions { seed: Some(seed), ..quiet() };
    let synth = cmd_synth(root, &SynthConfig::default(), &opts).unwrap().done().unwrap();
    let p = Pipeline::from_file(&synth.config_path, opts).unwrap();
    let tiled = p.tile().unwrap().done().unwrap();
    assert!(tiled.failed.is_empty(), "{:?}", tiled.failed);
    p.curate().unwrap();
    p.train().unwrap();
    let eval = p.eval().unwrap().done().unwrap();
    SyntheticRun {
        root: root.to_path_buf(),
        run_dir: p.run_dir(),
        tile_store: p.cfg.paths.tile_store.clone(),
        eval,
    }
}
