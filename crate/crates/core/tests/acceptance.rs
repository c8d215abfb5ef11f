//! Acceptance harness: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails. Runs without the libtest harness so the lines come
//! out in order and unbuffered.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tileforge::config::{write_slides_csv, PipelineConfig, SlideEntry};
use tileforge::dataset::{
    balance_undersample, cohort_summary, read_patients_csv, stratified_split, synthetic_entries, write_patients_csv,
    DatasetManifest, Split,
};
use tileforge::gradcam::{grad_cam_from, gradcam, normalize_map};
use tileforge::metrics::{roc_auc, scores, ConfusionMatrix};
use tileforge::nn::{tile_input, ModelSpec, ModelState};
use tileforge::pipeline::{Pipeline, RunOptions};
use tileforge::synth::{write_synthetic_slide, SlideStyle};
use tileforge::tiler::Raster;
use tileforge::ClassLabel;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn c1_metric_fixture() -> Verdict {
    let s = scores(&ConfusionMatrix::new(19_773, 484, 374, 19_883));
    let want = [0.97882, 0.97624, 0.98154, 0.97888];
    let got = [s.accuracy, s.precision, s.recall, s.f1].map(|v| v.expect("defined"));
    let worst = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    verdict(
        worst <= 5e-6,
        format!(
            "acc {:.7} prec {:.7} rec {:.7} f1 {:.7}; max |diff| {worst:.2e} (tol 5e-6)",
            got[0], got[1], got[2], got[3]
        ),
    )
}

fn c2_split_arithmetic() -> Verdict {
    let mut e = synthetic_entries(ClassLabel::Progressor, 1, 135_049, "P");
    e.extend(synthetic_entries(ClassLabel::NonProgressor, 1, 135_049, "N"));
    let m = stratified_split(DatasetManifest::from_entries(e, 7), [0.70, 0.15, 0.15], 7).unwrap();
    let got = [Split::Train, Split::Val, Split::Test].map(|s| m.split_count(s));
    verdict(got == [189_070, 40_514, 40_514], format!("{} / {} / {} (want 189070 / 40514 / 40514)", got[0], got[1], got[2]))
}

fn c3_balancing() -> Verdict {
    let mut e = synthetic_entries(ClassLabel::Progressor, 40, 3_577, "P");
    e.extend(synthetic_entries(ClassLabel::NonProgressor, 1, 192_683, "N"));
    let m = DatasetManifest::from_entries(e, 3);
    let pool = m.counts()[&Split::Pool];
    let m = balance_undersample(m, 3).unwrap();
    let c = m.counts();
    let kept = c[&Split::Pool];
    let discarded = c[&Split::Discarded].total();
    verdict(
        (pool.progressor, pool.non_progressor) == (143_080, 192_683)
            && (kept.progressor, kept.non_progressor) == (143_080, 143_080)
            && discarded == 49_603,
        format!(
            "{} / {} -> {} / {}, {discarded} discarded (want 143080 / 143080, 49603)",
            pool.progressor, pool.non_progressor, kept.progressor, kept.non_progressor
        ),
    )
}

fn c4_gradients() -> Verdict {
    let reports: Vec<_> = (0..24).map(common::fd_check).collect();
    let worst = reports.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).unwrap();
    let params: usize = reports.iter().map(|r| r.checked).sum();
    verdict(
        worst.max_rel < 1e-3,
        format!(
            "{} models, {params} parameters; worst rel err {:.2e} at {} (tol 1e-3)",
            reports.len(),
            worst.max_rel,
            worst.worst
        ),
    )
}

/// Mann-Whitney pair counting with ties worth one half.
fn pair_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn c5_auroc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 100 {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(2..=40);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        // coarse levels force many ties
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let auc = roc_auc(&labels, &s).unwrap().auc;
        worst = worst.max((auc - pair_auc(&labels, &s)).abs());
        done += 1;
    }
    verdict(worst <= 1e-12, format!("{done} instances; max |trapezoid - pairs| {worst:.1e} (tol 1e-12)"))
}

fn c6_c7_end_to_end() -> (Verdict, Verdict) {
    let a = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let run = common::synthetic_run(a.path(), 2024);
    let elapsed = t.elapsed();
    let r = &run.eval.report;
    let acc = r.tile_level.scores.accuracy.unwrap_or(0.0);
    let c6 = verdict(
        acc >= 0.95 && r.n_correct_slides == 20 && r.n_slides == 20 && elapsed < Duration::from_secs(30 * 60),
        format!(
            "TEST accuracy {acc:.4} on {} tiles (min 0.95); held-out {}/{} correct (want 20/20); {:.0} s (max 1800 s)",
            r.tile_level.n_tiles,
            r.n_correct_slides,
            r.n_slides,
            elapsed.as_secs_f64()
        ),
    );
    let b = tempfile::tempdir().unwrap();
    let again = common::synthetic_run(b.path(), 2024);
    let files = ["manifest.jsonl", "checkpoint.tfck", "eval/metrics.json"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(run.run_dir.join(f)).ok() != std::fs::read(again.run_dir.join(f)).ok())
        .collect();
    let c7 = verdict(
        differing.is_empty() && run.run_dir.file_name() == again.run_dir.file_name(),
        if differing.is_empty() {
            "manifest.jsonl, checkpoint.tfck, eval/metrics.json byte-identical".to_string()
        } else {
            format!("differing: {differing:?}")
        },
    );
    (c6, c7)
}

fn c8_gradcam() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    for trial in 0..50 {
        let (h, w, c) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5));
        let acts: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(0.0..3.0)).collect();
        let grads: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw = grad_cam_from(&acts, &grads, h, w, c);
        let norm = normalize_map(&raw);
        if raw.iter().any(|&v| v < 0.0) {
            failures.push(format!("trial {trial}: negative map value"));
        }
        let max = norm.iter().cloned().fold(0.0, f64::max);
        if raw.iter().any(|&v| v > 0.0) && (max - 1.0).abs() > 1e-12 {
            failures.push(format!("trial {trial}: normalized max {max}"));
        }
        let k = rng.gen_range(0.01..100.0);
        let scaled: Vec<f64> = grads.iter().map(|g| g * k).collect();
        let norm_k = normalize_map(&grad_cam_from(&acts, &scaled, h, w, c));
        if norm.iter().zip(&norm_k).any(|(a, b)| (a - b).abs() > 1e-9) {
            failures.push(format!("trial {trial}: not invariant to gradient scale {k:.3}"));
        }
    }
    // two channels by hand
    let (h, w) = (3, 2);
    let a1 = [1.0, 2.0, 0.5, 0.0, 3.0, 1.0];
    let a2 = [0.0, 1.0, 2.0, 4.0, 0.5, 1.5];
    let g1 = [0.3, 0.1, -0.2, 0.4, 0.0, 0.6];
    let g2 = [-0.5, -0.1, -0.3, 0.2, -0.4, -0.1];
    let alpha1 = g1.iter().sum::<f64>() / 6.0;
    let alpha2 = g2.iter().sum::<f64>() / 6.0;
    let expect: Vec<f64> = (0..6).map(|i| (alpha1 * a1[i] + alpha2 * a2[i]).max(0.0)).collect();
    let interleave = |x: &[f64; 6], y: &[f64; 6]| -> Vec<f64> { (0..6).flat_map(|i| [x[i], y[i]]).collect() };
    let got = grad_cam_from(&interleave(&a1, &a2), &interleave(&g1, &g2), h, w, 2);
    if got.iter().zip(&expect).any(|(a, b)| (a - b).abs() > 1e-12) {
        failures.push(format!("2-channel oracle: {got:?} vs {expect:?}"));
    }
    // full-size network: 224 input gives a 7x7 map
    let model = ModelState::<f32>::new(ModelSpec::default(), 8).unwrap();
    let tile = Raster::new(224, 224, (0..224 * 224 * 3).map(|_| rng.gen()).collect());
    let map = gradcam(&model, &tile).unwrap();
    if (map.height, map.width) != (7, 7) {
        failures.push(format!("224 input gave a {}x{} map", map.height, map.width));
    }
    // model-level two-channel oracle: behind the pooled head the logit
    // gradient is head.weight / (h * w) everywhere
    let spec = ModelSpec::square(16, 1, 1);
    let model = ModelState::<f64>::new(spec.clone(), 81).unwrap();
    let tile = Raster::new(16, 16, (0..16 * 16 * 3).map(|_| rng.gen()).collect());
    let input: Vec<f64> = tile_input(&spec, &tile).unwrap();
    let fg = model.feature_gradient(&input).unwrap();
    let head = &model.params[spec.param_shapes().iter().position(|(n, _)| n == "head.weight").unwrap()];
    let hw = (fg.height * fg.width) as f64;
    let oracle: Vec<f64> = fg
        .activations
        .chunks_exact(2)
        .map(|a| (head[0] / hw * a[0] + head[1] / hw * a[1]).max(0.0))
        .collect();
    let map = gradcam(&model, &tile).unwrap();
    if fg.channels != 2 || map.raw.iter().zip(&oracle).any(|(a, b)| (a - b).abs() > 1e-12) {
        failures.push("model-level 2-channel map disagrees with head-weight oracle".into());
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "50 random maps non-negative, max-normalized, scale-invariant; 2-channel oracles exact; 224 -> 7x7".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn c9_parallel_equals_serial() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("slides")).unwrap();
    let side = 16_384;
    let t = Instant::now();
    let style = SlideStyle::random(ClassLabel::Progressor, side, side, 9);
    let ann = write_synthetic_slide(&root.join("slides/BIG.tiff"), "BIG", &style, 3, 512, 0.25).unwrap();
    std::fs::write(root.join("BIG.json"), ann.to_json()).unwrap();
    write_slides_csv(
        root.join("slides.csv"),
        &[SlideEntry {
            slide_id: "BIG".into(),
            patient_id: "P".into(),
            label: ClassLabel::Progressor,
            slide_path: "slides/BIG.tiff".into(),
            annotation_path: Some("BIG.json".into()),
        }],
    )
    .unwrap();
    let synth_time = t.elapsed();
    let t = Instant::now();
    let tile_with = |jobs: usize| {
        let mut cfg = PipelineConfig::default();
        cfg.paths.tile_store = format!("tiles-{jobs}").into();
        cfg.resolve_paths(root);
        let p = Pipeline::new(
            cfg,
            RunOptions {
                jobs: Some(jobs),
                ..common::quiet()
            },
        )
        .unwrap();
        let out = p.tile().unwrap().done().unwrap();
        (out.total_kept(), p.store_dir("BIG"))
    };
    let (kept1, s1) = tile_with(1);
    let (kept8, s8) = tile_with(8);
    let tiling = t.elapsed();
    let same = ["slide.json", "tiles.jsonl", "tiles.bin"]
        .iter()
        .all(|f| std::fs::read(s1.join(f)).unwrap() == std::fs::read(s8.join(f)).unwrap());
    verdict(
        same && kept1 == kept8 && kept1 > 0 && tiling < Duration::from_secs(300),
        format!(
            "256 tiles, {kept1} kept; stores {}; tiling {:.0} s (max 300 s), slide synthesis {:.0} s",
            if same { "byte-identical" } else { "DIFFER" },
            tiling.as_secs_f64(),
            synth_time.as_secs_f64()
        ),
    )
}

fn c10_cohort_fixture(dir: &Path) -> Verdict {
    let path = dir.join("patients.csv");
    write_patients_csv(&path, &common::reference_cohorts()).unwrap();
    let s = cohort_summary(&read_patients_csv(&path).unwrap()).unwrap();
    let (p, n) = (&s[&ClassLabel::Progressor], &s[&ClassLabel::NonProgressor]);
    let ok = (p.n, n.n) == (32, 22)
        && (p.median_age, n.median_age) == (79.0, 69.0)
        && (p.age_range, n.age_range) == ((54, 95), (54, 79))
        && (p.mean_biopsies, n.mean_biopsies) == (1.56, 2.32)
        && (p.mean_interval_days.round(), n.mean_interval_days.round()) == (863.0, 1659.0);
    verdict(
        ok,
        format!(
            "progressor n {} median {} biopsies {} interval {}; non-progressor n {} median {} biopsies {} interval {}",
            p.n, p.median_age, p.mean_biopsies, p.mean_interval_days, n.n, n.median_age, n.mean_biopsies, n.mean_interval_days
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    })
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let want = |n: u32| filter.as_deref().is_none_or(|f| f == n.to_string() || f == "all");
    let scratch = tempfile::tempdir().unwrap();
    let budgets = [1.0, 5.0, 5.0, 120.0, 30.0, 1800.0, 1800.0, 60.0, 300.0, 1.0];
    let names = [
        "metric fixture",
        "split arithmetic",
        "balancing fixture",
        "gradient suite",
        "AUROC oracle",
        "end-to-end synthetic run",
        "determinism",
        "Grad-CAM suite",
        "parallel equals serial",
        "cohort summary fixture",
    ];
    let mut results: Vec<(u32, Verdict, Duration)> = Vec::new();
    let mut run = |n: u32, f: &mut dyn FnMut() -> Verdict| {
        if !want(n) {
            return;
        }
        let t = Instant::now();
        let mut v = guarded(f);
        let took = t.elapsed();
        // criteria 6 and 7 share one timed run and report their own budget
        if n != 6 && n != 7 && took.as_secs_f64() > budgets[n as usize - 1] {
            v.pass = false;
            v.detail.push_str(&format!("; over the {} s budget", budgets[n as usize - 1]));
        }
        println!(
            "criterion {n:>2} {:<26} {}  {}  [{:.2} s]",
            names[n as usize - 1],
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
        results.push((n, v, took));
    };
    run(1, &mut c1_metric_fixture);
    run(2, &mut c2_split_arithmetic);
    run(3, &mut c3_balancing);
    run(4, &mut c4_gradients);
    run(5, &mut c5_auroc_oracle);
    if want(6) || want(7) {
        let t = Instant::now();
        let (c6, c7) = match catch_unwind(c6_c7_end_to_end) {
            Ok(pair) => pair,
            Err(_) => (verdict(false, "pipeline panicked"), verdict(false, "pipeline panicked")),
        };
        let took = t.elapsed();
        let mut pending = [Some(c6), Some(c7)];
        for n in [6u32, 7] {
            let v = pending[n as usize - 6].take().unwrap();
            run(n, &mut || Verdict {
                pass: v.pass,
                detail: format!("{} (two full runs took {:.0} s)", v.detail, took.as_secs_f64()),
            });
        }
    }
    run(8, &mut c8_gradcam);
    run(9, &mut c9_parallel_equals_serial);
    run(10, &mut || c10_cohort_fixture(scratch.path()));
    let failed: Vec<u32> = results.iter().filter(|(_, v, _)| !v.pass).map(|(n, _, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
