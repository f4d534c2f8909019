//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed; exits nonzero if any
//! criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segreg_core::config::ExperimentConfig;
use segreg_core::dataset::{generate_synthetic, read_split_manifest, split_file_name, SyntheticConfig};
use segreg_core::losses::{gncc, gncc_grad, smoothness_penalty, smoothness_penalty_grad, soft_dice_loss, soft_dice_loss_grad};
use segreg_core::metrics::{dsc, hausdorff};
use segreg_core::models::RegModel;
use segreg_core::plane::Plane;
use segreg_core::stats::wilcoxon_signed_rank;
use segreg_core::trainer::{fit_registration, phase_rng, read_batch_log, Phase, RegFit, RegPair, RunLog};
use segreg_core::warp::{
    apply_spatial, invert_augment, warp, warp_vjp, AugmentRanges, AugmentSpec, BorderPolicy, DisplacementField,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Plane<f64> {
    Plane::from_fn(h, w, |_, _| rng.gen_range(lo..hi))
}

// ---------------------------------------------------------------------------
// 1. Loss oracles: direct transcriptions of the formulas, in index form.

fn dice_oracle(p: &Plane<f64>, t: &Plane<f64>) -> f64 {
    let (h, w) = p.shape();
    let (mut num, mut den) = (0.0, 1e-6);
    for i in 0..h {
        for j in 0..w {
            num += p.get(i, j) * t.get(i, j);
            den += p.get(i, j).powi(2) + t.get(i, j).powi(2);
        }
    }
    1.0 - 2.0 * num / den
}

fn gncc_oracle(x: &Plane<f64>, y: &Plane<f64>) -> f64 {
    let n = x.len() as f64;
    let mx = x.as_slice().iter().sum::<f64>() / n;
    let my = y.as_slice().iter().sum::<f64>() / n;
    let sx = (x.as_slice().iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.as_slice().iter().map(|v| (v - my).powi(2)).sum::<f64>() / n).sqrt();
    let cov: f64 = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    -cov / (sx * sy).max(1e-6)
}

fn smooth_oracle(d: &DisplacementField<f64>) -> f64 {
    let (h, w) = d.shape();
    let (mut horiz, mut vert) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let (a, b) = d.at(i, j);
            if j + 1 < w {
                let (c, e) = d.at(i, j + 1);
                horiz += (c - a).powi(2) + (e - b).powi(2);
            }
            if i + 1 < h {
                let (c, e) = d.at(i + 1, j);
                vert += (c - a).powi(2) + (e - b).powi(2);
            }
        }
    }
    0.5 * (horiz / (h * (w - 1)) as f64 + vert / ((h - 1) * w) as f64)
}

fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> DisplacementField<f64> {
    DisplacementField::from_fn(h, w, |_, _| (rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)))
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let p = random_plane(&mut rng, 8, 8, 0.0, 1.0);
        let t = random_plane(&mut rng, 8, 8, 0.0, 1.0);
        let x = random_plane(&mut rng, 8, 8, -1.0, 2.0);
        let y = random_plane(&mut rng, 8, 8, 0.0, 1.0);
        let d = random_field(&mut rng, 8, 8, 3.0);
        worst = worst
            .max((soft_dice_loss(&p, &t).unwrap().value - dice_oracle(&p, &t)).abs())
            .max((gncc(&x, &y).unwrap().value - gncc_oracle(&x, &y)).abs())
            .max((smoothness_penalty(&d).value - smooth_oracle(&d)).abs());
    }
    outcome(worst < 1e-6, format!("50 random 8x8 inputs, max abs error {worst:.2e} (tol 1e-6)"))
}

// ---------------------------------------------------------------------------
// 2. Gradient checks against central differences.

const FD_STEP: f64 = 1e-4;

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn fd_plane(p: &Plane<f64>, f: impl Fn(&Plane<f64>) -> f64) -> Vec<f64> {
    (0..p.len())
        .map(|k| {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.as_mut_slice()[k] += FD_STEP;
            b.as_mut_slice()[k] -= FD_STEP;
            (f(&a) - f(&b)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn fd_field(d: &DisplacementField<f64>, f: impl Fn(&DisplacementField<f64>) -> f64) -> Vec<f64> {
    let n = d.dy().len();
    let mut out = Vec::with_capacity(2 * n);
    for comp in 0..2 {
        for k in 0..n {
            let (mut a, mut b) = (d.clone(), d.clone());
            if comp == 0 {
                a.dy_mut()[k] += FD_STEP;
                b.dy_mut()[k] -= FD_STEP;
            } else {
                a.dx_mut()[k] += FD_STEP;
                b.dx_mut()[k] -= FD_STEP;
            }
            out.push((f(&a) - f(&b)) / (2.0 * FD_STEP));
        }
    }
    out
}

fn field_vec(d: &DisplacementField<f64>) -> Vec<f64> {
    d.dy().iter().chain(d.dx()).copied().collect()
}

/// Field whose sampling positions stay inside the grid and away from the
/// integer lattice, where bilinear interpolation has kinks.
fn smooth_region_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DisplacementField<f64> {
    let mut pick = |pos: usize, len: usize| loop {
        let target = rng.gen_range(0.0..(len - 1) as f64);
        let frac = target.fract();
        if (0.1..0.9).contains(&frac) {
            return target - pos as f64;
        }
    };
    let mut dy = vec![0.0; h * w];
    let mut dx = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            dy[i * w + j] = pick(i, h);
            dx[i * w + j] = pick(j, w);
        }
    }
    DisplacementField::from_components(h, w, dy, dx).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut dice_e, mut gncc_e, mut smooth_e, mut warp_e) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let p = random_plane(&mut rng, 8, 8, 0.05, 0.95);
        let t = random_plane(&mut rng, 8, 8, 0.0, 1.0);
        let g = soft_dice_loss_grad(&p, &t).unwrap();
        dice_e = dice_e.max(rel_error(g.as_slice(), &fd_plane(&p, |q| soft_dice_loss(q, &t).unwrap().value)));

        let x = random_plane(&mut rng, 8, 8, 0.0, 1.0);
        let y = random_plane(&mut rng, 8, 8, 0.0, 1.0);
        let g = gncc_grad(&x, &y).unwrap();
        gncc_e = gncc_e.max(rel_error(g.as_slice(), &fd_plane(&x, |q| gncc(q, &y).unwrap().value)));

        let d = random_field(&mut rng, 8, 8, 2.0);
        let g = smoothness_penalty_grad(&d);
        smooth_e = smooth_e.max(rel_error(&field_vec(&g), &fd_field(&d, |q| smoothness_penalty(q).value)));

        let img = random_plane(&mut rng, 8, 8, 0.0, 1.0);
        let c = random_plane(&mut rng, 8, 8, -1.0, 1.0);
        let d = smooth_region_field(&mut rng, 8, 8);
        for border in [BorderPolicy::ClampToEdge, BorderPolicy::ZeroFill] {
            let (_, gd) = warp_vjp(&img, &d, border, &c).unwrap();
            let f = |q: &DisplacementField<f64>| {
                warp(&img, q, border).unwrap().as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            };
            warp_e = warp_e.max(rel_error(&field_vec(&gd), &fd_field(&d, f)));
        }
    }
    let worst = dice_e.max(gncc_e).max(smooth_e).max(warp_e);
    outcome(
        worst < 1e-4,
        format!("max relative error: dice {dice_e:.1e}, gncc {gncc_e:.1e}, smoothness {smooth_e:.1e}, warp/field {warp_e:.1e} (tol 1e-4)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Warp invariants.

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut identity = true;
    let mut shift = true;
    for (h, w) in [(8, 8), (13, 7), (32, 32)] {
        let img: Plane<f32> = Plane::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0));
        for border in [BorderPolicy::ClampToEdge, BorderPolicy::ZeroFill] {
            identity &= warp(&img, &DisplacementField::zeros(h, w), border).unwrap() == img;
            for _ in 0..5 {
                let (a, b) = (rng.gen_range(-3i64..=3), rng.gen_range(-3i64..=3));
                let out = warp(&img, &DisplacementField::constant(h, w, a as f32, b as f32), border).unwrap();
                for i in 0..h as i64 {
                    for j in 0..w as i64 {
                        let (si, sj) = (i + a, j + b);
                        if (0..h as i64).contains(&si) && (0..w as i64).contains(&sj) {
                            shift &= out.get(i as usize, j as usize) == img.get(si as usize, sj as usize);
                        }
                    }
                }
            }
        }
    }
    let samples = generate_synthetic(&SyntheticConfig { count: 20, image_size: 64, ..SyntheticConfig::default() }, 3).unwrap();
    let ranges = AugmentRanges::default();
    let mut worst: f64 = 0.0;
    for s in &samples {
        let m = s.mask.as_ref().unwrap().to_soft();
        for _ in 0..5 {
            let spec = AugmentSpec::sample(&mut rng, &ranges);
            let back = invert_augment(&apply_spatial(&m, &spec, BorderPolicy::MASK), &spec);
            let mae = back.as_slice().iter().zip(m.as_slice()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
                / m.len() as f64;
            worst = worst.max(mae);
        }
    }
    outcome(
        identity && shift && worst < 0.02,
        format!("zero-field identity exact: {identity}; integer shifts exact on interior: {shift}; TTA round-trip max MAE {worst:.4} over 100 mask/spec pairs (tol 0.02)"),
    )
}

// ---------------------------------------------------------------------------
// 4. Metric oracles.

fn brute_hausdorff(a: &Plane<bool>, b: &Plane<bool>) -> f64 {
    let pts = |m: &Plane<bool>| -> Vec<(f64, f64)> {
        let mut v = vec![];
        for i in 0..m.height() {
            for j in 0..m.width() {
                if m.get(i, j) {
                    v.push((i as f64, j as f64));
                }
            }
        }
        v
    };
    let (pa, pb) = (pts(a), pts(b));
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        p.iter()
            .map(|x| q.iter().map(|y| ((x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut hd_ok = 0;
    for _ in 0..100 {
        let density = rng.gen_range(0.02..0.4);
        let mut a = Plane::from_fn(16, 16, |_, _| rng.gen_bool(density));
        let mut b = Plane::from_fn(16, 16, |_, _| rng.gen_bool(density));
        a.set(rng.gen_range(0..16), rng.gen_range(0..16), true);
        b.set(rng.gen_range(0..16), rng.gen_range(0..16), true);
        let got = hausdorff(&a, &b).unwrap().unwrap();
        hd_ok += ((got - brute_hausdorff(&a, &b)).abs() < 1e-9) as usize;
    }
    let block = Plane::from_fn(4, 4, |i, j| i < 2 && j < 2);
    let shifted = Plane::from_fn(4, 4, |i, j| i < 2 && (1..3).contains(&j));
    let disjoint = Plane::from_fn(4, 4, |i, _| i >= 2);
    let empty = Plane::filled(4, 4, false);
    let dsc_ok = dsc(&block, &block).unwrap() == 1.0
        && dsc(&block, &shifted).unwrap() == 0.5
        && dsc(&block, &disjoint).unwrap() == 0.0
        && dsc(&empty, &empty).unwrap() == 1.0;
    let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6]).unwrap();
    let wil_ok = (w.p_value - 0.03125).abs() < 1e-12;
    outcome(
        hd_ok == 100 && dsc_ok && wil_ok,
        format!("hausdorff = brute force on {hd_ok}/100 pairs; dsc hand cases {dsc_ok}; wilcoxon n=6 p = {}", w.p_value),
    )
}

// ---------------------------------------------------------------------------
// 5. Known-transform registration.

const MAX_SHIFT: f64 = 6.0;

/// Target is the source translated by `t`: target(p) = source(p - t). The
/// ideal field is therefore d = -t everywhere.
fn translated_pair(src: &Plane<f32>, ty: f64, tx: f64) -> Plane<f32> {
    let (h, w) = src.shape();
    warp(src, &DisplacementField::constant(h, w, -ty as f32, -tx as f32), BorderPolicy::IMAGE).unwrap()
}

fn criterion_5() -> Outcome {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = 5;
    let data = SyntheticConfig { count: 160, ..cfg.data.clone() };
    let samples = generate_synthetic(&data, 55).unwrap();
    let (train, held_out) = samples.split_at(120);
    let mut model = RegModel::new(cfg.reg.clone(), 5).unwrap();
    let fit = RegFit { phase: Phase::RegPretrain, iteration: 0, lr: cfg.reg_lr_initial, epochs: 12 };
    let mut rng = phase_rng(cfg.seed, 0, Phase::RegPretrain);
    fit_registration(&mut model, &cfg, &fit, &mut rng, &mut RunLog::in_memory("translation"), |rng| {
        train
            .iter()
            .map(|s| {
                let (ty, tx) = (rng.gen_range(-MAX_SHIFT..=MAX_SHIFT), rng.gen_range(-MAX_SHIFT..=MAX_SHIFT));
                RegPair {
                    source_id: s.id.clone(),
                    target_id: s.id.clone(),
                    source: s.image.clone(),
                    target: translated_pair(&s.image, ty, tx),
                    masks: None,
                }
            })
            .collect()
    })
    .unwrap();

    let mut eval_rng = ChaCha8Rng::seed_from_u64(505);
    let (mut errors, mut improved) = (vec![], 0);
    for s in held_out {
        let (ty, tx) = (eval_rng.gen_range(-MAX_SHIFT..=MAX_SHIFT), eval_rng.gen_range(-MAX_SHIFT..=MAX_SHIFT));
        let target = translated_pair(&s.image, ty, tx);
        let pyramid = model.register(&s.image, &target).unwrap();
        let field = pyramid.finest();
        let (my, mx) = field.median();
        errors.push(((my + ty).powi(2) + (mx + tx).powi(2)).sqrt());
        let before = gncc(&s.image, &target).unwrap().value;
        let after = gncc(&warp(&s.image, field, BorderPolicy::IMAGE).unwrap(), &target).unwrap().value;
        improved += (after < before) as usize;
    }
    errors.sort_by(f64::total_cmp);
    let median = (errors[19] + errors[20]) / 2.0;
    let within = errors.iter().filter(|e| **e <= 1.0).count();
    let frac = improved as f64 / 40.0;
    outcome(
        median <= 1.0 && frac >= 0.8,
        format!(
            "40 held-out pairs, shifts up to {MAX_SHIFT} px: median displacement error {median:.3} px ({within}/40 within 1 px), GNCC improved on {:.0}%",
            frac * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 6-9. End-to-end runs through the CLI.

fn segreg(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_segreg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("segreg binary runs");
    assert!(
        out.status.success(),
        "segreg {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Summary {
    method: String,
    dsc: f64,
}

fn summaries(run: &Path) -> Vec<Summary> {
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    json["summaries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| Summary { method: s["method"].as_str().unwrap().into(), dsc: s["dsc_mean"].as_f64().unwrap() })
        .collect()
}

struct DeskRuns {
    runs: Vec<PathBuf>,
    elapsed: Duration,
}

fn desk_runs(root: &Path) -> DeskRuns {
    let start = Instant::now();
    let data = root.join("data");
    let runs = root.join("runs");
    segreg(&["gen-data", "--out", path(&data), "--preset", "desk"]);
    let mut dirs = vec![];
    for method in ["fs", "mt", "joint"] {
        let dir =
            segreg(&["train", "--method", method, "--rate", "0.01", "--seed", "0", "--data", path(&data), "--runs", path(&runs), "--preset", "desk"]);
        let dir = PathBuf::from(dir.trim());
        segreg(&["eval", "--run", path(&dir)]);
        dirs.push(dir);
    }
    DeskRuns { runs: dirs, elapsed: start.elapsed() }
}

fn criterion_6(desk: &DeskRuns) -> Outcome {
    let all: Vec<Summary> = desk.runs.iter().flat_map(|r| summaries(r)).collect();
    let get = |m: &str| all.iter().find(|s| s.method == m).map(|s| s.dsc).unwrap();
    let (fs, mt, joint, combined) = (get("FS"), get("MT"), get("Joint"), get("Combined"));
    let minutes = desk.elapsed.as_secs_f64() / 60.0;
    let pass = combined >= joint - 0.02 && joint >= fs + 0.05 && joint >= mt && minutes < 45.0;
    outcome(
        pass,
        format!("test DSC FS {fs:.4}, MT {mt:.4}, Joint {joint:.4}, Combined {combined:.4}; all three runs {minutes:.1} min (limit 45)"),
    )
}

fn fused_history(run: &Path) -> Vec<(f64, f64)> {
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("history.json")).unwrap()).unwrap();
    json.as_array()
        .unwrap()
        .iter()
        .map(|h| (h["pseudo"]["fused_dsc"].as_f64().unwrap(), h["pseudo"]["mean_entropy"].as_f64().unwrap()))
        .collect()
}

fn criterion_7(desk: &DeskRuns) -> Outcome {
    let h = fused_history(&desk.runs[2]);
    let (first, last) = (h[0].0, h[h.len() - 1].0);
    let trace: Vec<String> = h.iter().map(|x| format!("{:.4}", x.0)).collect();
    outcome(
        last - first >= 0.05,
        format!("fused pseudo-mask DSC by iteration [{}]: gain {:+.4} (need +0.05)", trace.join(", "), last - first),
    )
}

fn entropy_invariant(desk: &DeskRuns) -> Outcome {
    let h = fused_history(&desk.runs[2]);
    let ok = h.windows(2).all(|w| w[1].1 <= w[0].1 * 1.05);
    let trace: Vec<String> = h.iter().map(|x| format!("{:.4}", x.1)).collect();
    outcome(ok, format!("mean pseudo-mask entropy by iteration [{}], non-increasing within 5%", trace.join(", ")))
}

fn criterion_8(root: &Path) -> (Outcome, Vec<PathBuf>) {
    let data = root.join("data");
    segreg(&["gen-data", "--out", path(&data), "--preset", "quick"]);
    let mut dirs = vec![];
    for copy in ["a", "b"] {
        let runs = root.join(copy);
        let dir = segreg(&["train", "--method", "joint", "--rate", "0.1", "--seed", "7", "--data", path(&data), "--runs", path(&runs), "--preset", "quick"]);
        let dir = PathBuf::from(dir.trim());
        segreg(&["eval", "--run", path(&dir)]);
        dirs.push(dir);
    }
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    let same = read(&dirs[0]) == read(&dirs[1]);
    let rows = String::from_utf8(read(&dirs[0])).unwrap().lines().count() - 1;
    (outcome(same, format!("two seeded joint runs (quick preset): metrics.csv identical = {same} ({rows} rows)")), dirs)
}

fn criterion_9(runs: &[PathBuf]) -> Outcome {
    let mut batches = 0;
    let mut leaks = BTreeSet::new();
    for dir in runs {
        let cfg = ExperimentConfig::load(&dir.join("config.json")).unwrap();
        let manifest = read_split_manifest(&dir.join(split_file_name(cfg.annotation_rate, cfg.seed))).unwrap();
        let test: BTreeSet<&str> = manifest.ids.test.iter().map(String::as_str).collect();
        for b in read_batch_log(dir).unwrap() {
            batches += 1;
            for id in b.ids.split(' ') {
                if test.contains(id) {
                    leaks.insert(format!("{}:{id}", b.method));
                }
            }
        }
    }
    outcome(
        leaks.is_empty() && batches > 0,
        format!("{batches} logged batches across {} runs, test ids seen in training: {}", runs.len(), leaks.len()),
    )
}

fn main() {
    // `cargo test` passes filter and option arguments; a filter that does not
    // mention this target skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    // ACCEPTANCE_ONLY=1,2,3 restricts the run to the listed criteria.
    let only: Option<Vec<String>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let mut failed = vec![];
    let mut report = |id: &str, name: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            println!("SKIP {id:>3} {name}");
            return;
        }
        let start = Instant::now();
        let o = f();
        let t = start.elapsed();
        let pass = o.pass && t < limit;
        println!("{} {id:>3} {name}: {} [{:.1} s, limit {} s]", if pass { "PASS" } else { "FAIL" }, o.detail, t.as_secs_f64(), limit.as_secs());
        if !pass {
            failed.push(id.to_string());
        }
    };
    let min = |m: u64| Duration::from_secs(60 * m);
    report("1", "loss oracles", Duration::from_secs(10), &mut criterion_1);
    report("2", "gradient checks", min(1), &mut criterion_2);
    report("3", "warp invariants", Duration::from_secs(30), &mut criterion_3);
    report("4", "metric oracles", min(1), &mut criterion_4);
    report("5", "known-transform registration", min(60), &mut criterion_5);

    let root = tempfile::tempdir().unwrap();
    let needs_desk = ["6", "7", "inv", "9"].iter().any(|id| wanted(id));
    let desk = if needs_desk { desk_runs(&root.path().join("desk")) } else { DeskRuns { runs: vec![], elapsed: Duration::ZERO } };
    report("6", "directional ordering at 1%", min(45), &mut || criterion_6(&desk));
    report("7", "pseudo-mask improvement over iterations", min(1), &mut || criterion_7(&desk));
    report("inv", "pseudo-mask entropy", min(1), &mut || entropy_invariant(&desk));
    let mut quick = vec![];
    report("8", "determinism", min(30), &mut || {
        let (o, dirs) = criterion_8(&root.path().join("quick"));
        quick = dirs;
        o
    });
    let all_runs: Vec<PathBuf> = desk.runs.iter().chain(&quick).cloned().collect();
    report("9", "split hygiene", min(1), &mut || criterion_9(&all_runs));

    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
