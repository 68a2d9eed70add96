//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test --test acceptance` (add `--release` for speed; the
//! test profile is already optimized).

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlsor::augment::{
    build_augmented_set, build_nested_sets, corrupted_variants, derive_seed, AugmentSpec, AugmentedPair, Split,
};
use xlsor::autograd::AttentionKind;
use xlsor::bench::time_attention;
use xlsor::cca::{attention_cost, CcaWeights};
use xlsor::dataset::DataSpec;
use xlsor::gradcheck::run_suite;
use xlsor::mask::Mask;
use xlsor::metrics::{averaged_hausdorff, image_metrics, mean_dice};
use xlsor::segnet::{poly_lr, train, MaskPair, Segmentor, SegmentorConfig, TrainConfig};
use xlsor::tensor::Tensor;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn report(results: &mut Vec<bool>, id: usize, title: &str, o: Outcome) {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!("{tag} [{id}] {title}: {}", o.detail);
    results.push(o.passed);
}

const BIN: &str = env!("CARGO_BIN_EXE_xlsor");

// 1 -------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_suite(20, 0).expect("suite runs");
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed || c.cases < 20)
        .map(|c| format!("{} ({:.2e})", c.name, c.max_rel_error))
        .collect();
    let worst_op = report.checks.iter().filter(|c| c.tolerance == 1e-6).map(|c| c.max_rel_error).fold(0.0, f64::max);
    let e2e = report.checks.iter().find(|c| c.name == "segmentor_end_to_end").expect("end-to-end check");
    let status = Command::new(BIN).args(["gradcheck"]).output().expect("binary runs").status;
    let elapsed = start.elapsed();
    let passed =
        failed.is_empty() && e2e.tolerance == 1e-5 && status.code() == Some(0) && elapsed < Duration::from_secs(120);
    outcome(
        passed,
        format!(
            "{} checks x20 cases, worst op err {worst_op:.2e} (< 1e-6), end-to-end {:.2e} (< 1e-5), \
             gradcheck exit {:?}, {:.1}s (< 120s){}",
            report.checks.len(),
            e2e.max_rel_error,
            status.code(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn receptive_field() -> Outcome {
    let start = Instant::now();
    let (h, w, c) = (5, 7, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let weights = CcaWeights::init(c, &mut rng);
    // moderate activations keep the softmax out of saturation, where a real
    // but e^-30-sized influence would fall under the probe's detection floor
    let input = Tensor::randn(&[1, c, h, w], 0.5, &mut rng);
    let mut bad = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let one = xlsor::cca::influence_map(|t| weights.apply(t, AttentionKind::CrissCross, 1), &input, (x, y))
                .expect("probe");
            let cross = Mask::from_fn(h, w, |px, py| px == x || py == y);
            if one != cross {
                bad.push(format!("1 pass from ({x},{y})"));
            }
            let two = xlsor::cca::influence_map(|t| weights.apply(t, AttentionKind::CrissCross, 2), &input, (x, y))
                .expect("probe");
            if two.count() != h * w {
                bad.push(format!("2 passes from ({x},{y}) reach {}", two.count()));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        bad.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "35 sources on 5x7: one pass = row+column, two passes = all 35 pixels; {} mismatches, {:.1}s (< 60s){}",
            bad.len(),
            elapsed.as_secs_f64(),
            bad.first().map(|b| format!(", first: {b}")).unwrap_or_default()
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let weights = CcaWeights::init(8, &mut rng);
    let mut worst: f64 = 0.0;
    for n in 1..=8 {
        for (h, w) in [(1, n), (n, 1)] {
            let input = Tensor::randn(&[2, 8, h, w], 1.0, &mut rng);
            let cc = weights.apply(&input, AttentionKind::CrissCross, 1).expect("cc");
            let nl = weights.apply(&input, AttentionKind::NonLocal, 1).expect("nl");
            let diff = cc.data().iter().zip(nl.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(diff);
        }
    }
    let cc_cost = attention_cost(64, 64, 16, 2, AttentionKind::CrissCross);
    let nl_cost = attention_cost(64, 64, 16, 2, AttentionKind::NonLocal);
    let exact_ratio = nl_cost * 127 == cc_cost * 4096;

    let bench_weights = CcaWeights::init(16, &mut rng);
    let input = Tensor::randn(&[1, 16, 64, 64], 1.0, &mut rng);
    let cc_time = time_attention(&bench_weights, &input, AttentionKind::CrissCross, 3).expect("time cc");
    let nl_time = time_attention(&bench_weights, &input, AttentionKind::NonLocal, 3).expect("time nl");
    let time_ratio = nl_time / cc_time;
    outcome(
        worst <= 1e-10 && exact_ratio && time_ratio >= 4.0,
        format!(
            "1xN/Nx1 (N<=8) max |cc - nonlocal| {worst:.1e} (<= 1e-10); cost ratio {nl_cost}/{cc_cost} == 4096/127: \
             {exact_ratio}; wall-time ratio at 1x16x64x64 {time_ratio:.1}x (>= 4x)"
        ),
    )
}

// 4 -------------------------------------------------------------------------

/// Independent reference: set arithmetic on coordinate lists.
fn oracle_metrics(pred: &[(usize, usize)], gt: &[(usize, usize)]) -> [Option<f64>; 5] {
    let inter = pred.iter().filter(|p| gt.contains(p)).count() as f64;
    let (np, ng) = (pred.len() as f64, gt.len() as f64);
    let ratio = |num: f64, den: f64| {
        if den == 0.0 {
            if np == 0.0 && ng == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            num / den
        }
    };
    let rec = ratio(inter, ng);
    let pre = ratio(inter, np);
    let dice = ratio(2.0 * inter, np + ng);
    let vs = if np + ng == 0.0 { 1.0 } else { 1.0 - (np - ng).abs() / (np + ng) };
    let directed = |a: &[(usize, usize)], b: &[(usize, usize)]| {
        let mut total = 0.0;
        for &(ax, ay) in a {
            let mut best = f64::INFINITY;
            for &(bx, by) in b {
                let (dx, dy) = (ax as f64 - bx as f64, ay as f64 - by as f64);
                best = best.min((dx * dx + dy * dy).sqrt());
            }
            total += best;
        }
        total / a.len() as f64
    };
    let avd = if pred.is_empty() || gt.is_empty() { None } else { Some(directed(pred, gt).max(directed(gt, pred))) };
    [Some(rec), Some(pre), Some(dice), avd, Some(vs)]
}

fn small_masks() -> Vec<Vec<(usize, usize)>> {
    // row-major coordinates, matching the order foreground pixels are visited
    let cells: Vec<(usize, usize)> = (0..4).flat_map(|y| (0..4).map(move |x| (x, y))).collect();
    let mut out = vec![vec![]];
    for i in 0..16 {
        out.push(vec![cells[i]]);
        for j in i + 1..16 {
            out.push(vec![cells[i], cells[j]]);
            for k in j + 1..16 {
                out.push(vec![cells[i], cells[j], cells[k]]);
            }
        }
    }
    out
}

fn metric_oracle() -> Outcome {
    let sets = small_masks();
    let masks: Vec<Mask> = sets.iter().map(|s| Mask::from_fn(4, 4, |x, y| s.contains(&(x, y)))).collect();
    let mut mismatches = 0usize;
    let mut pairs = 0usize;
    for (a, ma) in sets.iter().zip(&masks) {
        for (b, mb) in sets.iter().zip(&masks) {
            pairs += 1;
            let m = image_metrics(ma, mb).expect("metrics");
            let got = [Some(m.rec), Some(m.pre), Some(m.dice), m.avd, Some(m.vs)];
            if got != oracle_metrics(a, b) {
                mismatches += 1;
            }
        }
    }
    let a = Mask::from_fn(3, 3, |x, y| x == 0 && y < 2);
    let b = Mask::from_fn(3, 3, |x, y| x == 0 && y == 2);
    let example = averaged_hausdorff(&a, &b).expect("avd");
    outcome(
        mismatches == 0 && pairs == 697 * 697 && example == 1.5,
        format!("{pairs} mask pairs, {mismatches} exact mismatches; worked example AVD = {example} (expect 1.5)"),
    )
}

// 5 -------------------------------------------------------------------------

fn poly_schedule() -> Outcome {
    let max = 20_000;
    let lr = |it| poly_lr(0.02, it, max, 0.9).expect("lr");
    let (l0, lmax, lhalf) = (lr(0), lr(max), lr(max / 2));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut iters: Vec<usize> = (0..1000).map(|_| rng.random_range(0..=max)).collect();
    iters.sort_unstable();
    iters.dedup();
    while iters.len() < 1000 {
        iters.push(rng.random_range(0..=max));
        iters.sort_unstable();
        iters.dedup();
    }
    let monotone = iters.windows(2).all(|w| lr(w[1]) < lr(w[0]));
    outcome(
        l0 == 0.02 && lmax == 0.0 && (lhalf - 0.010718).abs() <= 1e-6 && monotone,
        format!(
            "lr(0) = {l0}, lr(max) = {lmax}, lr(max/2) = {lhalf:.9} (0.010718 +/- 1e-6), \
             strictly decreasing over {} sampled iters: {monotone}",
            iters.len()
        ),
    )
}

// 6 and 7 ---------------------------------------------------------------------

const TABLE_SEEDS: [u64; 3] = [1, 2, 3];
const TRAIN_ITERS: usize = 2000;

struct SeedRun {
    seed: u64,
    dice_r: f64,
    dice_ra: f64,
    pseudo_dice: f64,
    reference: Segmentor,
}

fn table_run(seed: u64) -> SeedRun {
    let data = DataSpec { height: 64, width: 64, n_phantoms: 40, seed, test_corruption: None };
    let phantoms = data.phantoms().expect("phantoms");
    let splits = data.splits();
    let pick = |s: Split| -> Vec<MaskPair> {
        phantoms.iter().zip(&splits).filter(|(_, &sp)| sp == s).map(|(p, _)| p.to_pair()).collect()
    };
    let (train_set, val_set) = (pick(Split::Train), pick(Split::Val));
    let mut corrupted_images = Vec::new();
    let mut corrupted_masks = Vec::new();
    for (i, p) in phantoms.iter().enumerate().filter(|(i, _)| splits[*i] == Split::Test) {
        for (_, image) in corrupted_variants(p, 0.7, derive_seed(seed, 0xC0, i as u64)).expect("variants") {
            corrupted_images.push(image.reshape(&[1, 1, 64, 64]).expect("reshape"));
            corrupted_masks.push(p.true_mask.clone());
        }
    }
    let corrupted = Tensor::stack(&corrupted_images).expect("stack");
    let model = SegmentorConfig::with_seed(derive_seed(seed, 0x11, 0));
    let schedule = TrainConfig::new(TRAIN_ITERS, derive_seed(seed, 0x22, 0));

    let r = train(&train_set, &val_set, &model, &schedule).expect("train R").segmentor;
    let dice_r = mean_dice(&r.segment(&corrupted, 0.5).expect("segment"), &corrupted_masks).expect("dice");

    let spec = AugmentSpec { n_normal: 20, per_normal: 5, rounds: 4, seed: derive_seed(seed, 0x33, 0) };
    let aug = build_nested_sets(&spec, Some(&r), (64, 64)).expect("A4");
    let normals: Vec<&AugmentedPair> = aug.iter().filter(|a| a.style.is_none()).collect();
    let pseudo: Vec<Mask> = normals.iter().map(|a| a.pseudo_mask.clone()).collect();
    let truth: Vec<Mask> = normals.iter().map(|a| a.true_mask.clone()).collect();
    let pseudo_dice = mean_dice(&pseudo, &truth).expect("pseudo dice");

    let mut augmented = train_set.clone();
    augmented.extend(aug.iter().map(AugmentedPair::to_pair));
    let ra = train(&augmented, &val_set, &model, &schedule).expect("train R+A4").segmentor;
    let dice_ra = mean_dice(&ra.segment(&corrupted, 0.5).expect("segment"), &corrupted_masks).expect("dice");
    SeedRun { seed, dice_r, dice_ra, pseudo_dice, reference: r }
}

fn table_ordering(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let gains: Vec<f64> = runs.iter().map(|r| r.dice_ra - r.dice_r).collect();
    let per_seed = runs
        .iter()
        .map(|r| format!("seed {}: R {:.4} -> R+A4 {:.4}", r.seed, r.dice_r, r.dice_ra))
        .collect::<Vec<_>>()
        .join("; ");
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    outcome(
        gains.iter().all(|&g| g >= 0.03) && elapsed < Duration::from_secs(30 * 60),
        format!(
            "corrupted-test DICE gain >= 0.03 on every seed (mean gain {mean_gain:.4}); {per_seed}; {:.0}s (< 1800s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn pseudo_quality(runs: &[SeedRun]) -> Outcome {
    let dices: Vec<String> = runs.iter().map(|r| format!("{:.4}", r.pseudo_dice)).collect();
    outcome(
        runs.iter().all(|r| r.pseudo_dice >= 0.95),
        format!("propagated masks on 80 held-out normal phantoms per seed, DICE {} (>= 0.95)", dices.join(", ")),
    )
}

// 8 -------------------------------------------------------------------------

fn multiset(pairs: &[AugmentedPair]) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for p in pairs {
        *m.entry(format!("{}|{:?}|{:?}", p.id, p.style, p.image.data())).or_insert(0) += 1;
    }
    m
}

fn augmented_structure(reference: &Segmentor) -> Outcome {
    let a1 = build_augmented_set(100, 5, Some(reference), 8, (64, 64)).expect("A1");
    let normal = a1.iter().filter(|p| p.style.is_none()).count();
    let abnormal = a1.len() - normal;
    let by_source: HashMap<&str, &Mask> =
        a1.iter().filter(|p| p.style.is_none()).map(|p| (p.source_id.as_str(), &p.pseudo_mask)).collect();
    let inherited = a1.iter().all(|p| by_source[p.source_id.as_str()] == &p.pseudo_mask);

    let sets: Vec<Vec<AugmentedPair>> = (1..=3)
        .map(|rounds| {
            build_nested_sets(&AugmentSpec { n_normal: 20, per_normal: 5, rounds, seed: 9 }, Some(reference), (64, 64))
                .expect("nested")
        })
        .collect();
    let nested = sets.windows(2).all(|w| {
        let (small, big) = (multiset(&w[0]), multiset(&w[1]));
        small.iter().all(|(k, n)| big.get(k).is_some_and(|m| m >= n)) && w[1].len() == w[0].len() + 120
    });
    outcome(
        a1.len() == 600 && normal == 100 && abnormal == 500 && inherited && nested,
        format!(
            "{} pairs ({normal} normal + {abnormal} abnormal), pseudo masks inherited: {inherited}; \
             A1 < A2 < A3 as multisets (120 new pairs each): {nested}",
            a1.len()
        ),
    )
}

// 9 -------------------------------------------------------------------------

const PIPELINE_CONFIG: &str = r#"{
  "data": {"H": 64, "W": 64, "n_phantoms": 20, "seed": 11, "test_corruption": 0.7},
  "augment": {"n_normal": 3, "per_normal": 5, "rounds": 2, "seed": 12},
  "model": {"input_size": [64, 64], "base_channels": 8, "seed": 13},
  "train": {"max_iter": 30, "val_interval": 10, "seed": 14}
}"#;

fn xlsor(dir: &Path, args: &[&str]) -> bool {
    Command::new(BIN).current_dir(dir).args(args).output().is_ok_and(|o| o.status.success())
}

fn run_pipeline(dir: &Path) -> bool {
    std::fs::write(dir.join("config.json"), PIPELINE_CONFIG).expect("write config");
    let steps: [&[&str]; 8] = [
        &["gen-data", "--config", "config.json", "--out", "data"],
        &["train", "--config", "config.json", "--data", "data", "--out", "r.ckpt"],
        &["augment", "--config", "config.json", "--checkpoint", "r.ckpt", "--data", "data", "--out", "aug"],
        &["train", "--config", "config.json", "--data", "data", "--aug", "aug", "--out", "ra.ckpt"],
        &["eval", "--checkpoint", "ra.ckpt", "--data", "data", "--out", "test.json"],
        &["eval", "--checkpoint", "ra.ckpt", "--data", "data", "--split", "test_corrupted", "--out", "corrupted.json"],
        &["bench", "--sizes", "8,16", "--repeats", "1", "--out", "bench.json"],
        &["gradcheck", "--cases", "2", "--out", "gradcheck.json"],
    ];
    steps.iter().all(|args| xlsor(dir, args))
}

fn files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).expect("read dir") {
        let path = entry.expect("entry").path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

/// bench.json with its wall-time fields removed.
fn strip_wall_times(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).expect("bench json");
    for r in v["results"].as_array_mut().expect("results") {
        let r = r.as_object_mut().expect("object");
        r.remove("time_ratio");
        for kind in ["crisscross", "nonlocal"] {
            r[kind].as_object_mut().expect("timing").remove("seconds");
        }
    }
    v
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp"));
    if !(run_pipeline(a.path()) && run_pipeline(b.path())) {
        return outcome(false, "a pipeline step exited nonzero");
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    let rel = |root: &Path, f: &[std::path::PathBuf]| -> Vec<std::path::PathBuf> {
        f.iter().map(|p| p.strip_prefix(root).expect("prefix").to_path_buf()).collect()
    };
    if rel(a.path(), &fa) != rel(b.path(), &fb) {
        return outcome(false, "the two runs produced different file sets");
    }
    let mut differing = Vec::new();
    for (pa, pb) in fa.iter().zip(&fb) {
        let (ba, bb) = (std::fs::read(pa).expect("read"), std::fs::read(pb).expect("read"));
        let same = if pa.file_name().is_some_and(|n| n == "bench.json") {
            strip_wall_times(&ba) == strip_wall_times(&bb)
        } else {
            ba == bb
        };
        if !same {
            differing.push(pa.strip_prefix(a.path()).expect("prefix").display().to_string());
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "gen-data, train, augment, train --aug, eval x2, bench, gradcheck run twice: {} files, {} differ{}",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    )
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "gradient suite", gradient_suite());
    report(&mut results, 2, "receptive field", receptive_field());
    report(&mut results, 3, "attention oracle and cost", attention_oracle());
    report(&mut results, 4, "metric oracle", metric_oracle());
    report(&mut results, 5, "poly schedule", poly_schedule());

    let start = Instant::now();
    let runs: Vec<SeedRun> = thread::scope(|s| {
        let handles: Vec<_> = TABLE_SEEDS.iter().map(|&seed| s.spawn(move || table_run(seed))).collect();
        handles.into_iter().map(|h| h.join().expect("seed run")).collect()
    });
    report(&mut results, 6, "augmentation gain on corrupted test", table_ordering(&runs, start.elapsed()));
    report(&mut results, 7, "pseudo-mask quality", pseudo_quality(&runs));
    report(&mut results, 8, "augmented-set structure", augmented_structure(&runs[0].reference));
    report(&mut results, 9, "CLI determinism", determinism());

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
