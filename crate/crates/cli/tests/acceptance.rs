//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Failing criteria are
//! reported but only turn into a non-zero exit status when
//! `ACCEPTANCE_STRICT=1` is set. `ACCEPTANCE_ONLY=1,2,7` runs a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use lumina_core::{
    albedo_silr_loss, chroma_silr_loss, decompose, dssim, evaluate, init_variables, lmse, make_set, objective,
    phase_h, phase_s, reorder_transform, si_mse, sidecar, silr, GridSpec, ImageSet, LinearImage, OptimConfig,
    Phase, PixelMask, SceneSpec, SetManifest, StackMatrix,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LinearImage {
    LinearImage::from_fn(w, h, |_, _| {
        [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)]
    })
    .unwrap()
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Relative error with a floor of `1e-3 * scale` so entries near zero are
/// judged against the gradient's overall magnitude.
fn rel_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// `sigma_2 / sigma_1` and `(s1 u2 v2^T - s2 u1 v1^T) / s1^2` from a full SVD.
fn svd_oracle(rows: usize, cols: usize, data: &[f64]) -> (f64, f64, Vec<f64>) {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let svd = m.svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let (i1, i2) = (order[0], order[1]);
    let (s1, s2) = (svd.singular_values[i1], svd.singular_values[i2]);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut grad = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            grad[r * cols + c] = (s1 * u[(r, i2)] * vt[(i2, c)] - s2 * u[(r, i1)] * vt[(i1, c)]) / (s1 * s1);
        }
    }
    (s2 / s1, s1 - s2, grad)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let (mut worst_fd, mut worst_oracle, mut worst_scale) = (0.0f64, 0.0f64, 0.0f64);
    let mut excluded = 0;
    for _ in 0..100 {
        let data: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = StackMatrix::new(4, 50, data.clone()).unwrap();
        let r = silr(&m, 1e-8).unwrap();
        let (value, gap, grad) = svd_oracle(4, 50, &data);
        if gap < 1e-6 {
            excluded += 1;
            continue;
        }
        let scale = max_abs(r.grad.iter().copied());
        worst_oracle = worst_oracle.max((r.value - value).abs());
        for (a, b) in r.grad.iter().zip(&grad) {
            worst_oracle = worst_oracle.max((a - b).abs() / scale);
        }
        for j in 0..200 {
            let f = |d: f64| {
                let mut p = data.clone();
                p[j] += d;
                silr(&StackMatrix::new(4, 50, p).unwrap(), 1e-8).unwrap().value
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            worst_fd = worst_fd.max(rel_error(r.grad[j], numeric, scale));
        }
        for alpha in [1e-3, 1.0, 1e3] {
            let scaled = silr(&m.scaled(alpha), 1e-8).unwrap().value;
            worst_scale = worst_scale.max((scaled - r.value).abs());
        }
    }
    let mut worst_rank1 = 0.0f64;
    for _ in 0..20 {
        let row: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data: Vec<f64> = (0..4)
            .flat_map(|_| {
                let k = rng.random_range(0.1..3.0);
                row.iter().map(move |v| k * v).collect::<Vec<_>>()
            })
            .collect();
        worst_rank1 = worst_rank1.max(silr(&StackMatrix::new(4, 50, data).unwrap(), 1e-8).unwrap().value);
    }
    let t = start.elapsed();
    outcome(
        worst_fd <= 1e-4 && worst_scale <= 1e-12 && worst_rank1 <= 1e-10 && worst_oracle <= 1e-9 && t.as_secs_f64() < 10.0,
        format!(
            "fd rel {worst_fd:.2e}, svd oracle {worst_oracle:.2e}, scale {worst_scale:.2e}, rank-1 {worst_rank1:.2e}, {excluded} excluded, {:.2}s",
            secs(t)
        ),
    )
}

/// Sampled central differences of a chained loss, skipping coordinates
/// whose one-sided slopes disagree (sort ties).
fn chained_fd(
    images: &[LinearImage],
    grads: &[Vec<f64>],
    value: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
    eval: impl Fn(&[LinearImage]) -> f64,
) -> (f64, usize, usize) {
    let h = 1e-6;
    let scale = max_abs(grads.iter().flatten().copied());
    let (mut worst, mut checked, mut ties) = (0.0f64, 0, 0);
    let (w, hh) = images[0].dims();
    for _ in 0..samples {
        let i = rng.random_range(0..images.len());
        let j = rng.random_range(0..w * hh * 3);
        let f = |d: f64| {
            let mut imgs = images.to_vec();
            let mut p = imgs[i].data().to_vec();
            p[j] += d;
            imgs[i] = LinearImage::new(w, hh, p).unwrap();
            eval(&imgs)
        };
        let (fp, fm) = (f(h), f(-h));
        let (fwd, bwd) = ((fp - value) / h, (value - fm) / h);
        if (fwd - bwd).abs() > 1e-3 * scale.max(fwd.abs()) {
            ties += 1;
            continue;
        }
        checked += 1;
        worst = worst.max(rel_error(grads[i][j], (fp - fm) / (2.0 * h), scale));
    }
    (worst, checked, ties)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (w, h) = (32, 32);
    let images: Vec<LinearImage> = (0..8).map(|_| random_image(&mut rng, w, h)).collect();
    let mask = PixelMask::full(w, h);
    let grid = GridSpec::new(4, 4).unwrap();
    let set = ImageSet::new(images.clone(), 0, mask.clone()).unwrap();

    let albedo = albedo_silr_loss(&images, &mask, grid).unwrap();
    let (wa, ca, ta) = chained_fd(&images, &albedo.grads, albedo.value, 400, &mut rng, |imgs| {
        albedo_silr_loss(imgs, &mask, grid).unwrap().value
    });
    let chroma = chroma_silr_loss(&images, &set, grid).unwrap();
    let (wc, cc, tc) = chained_fd(&images, &chroma.grads, chroma.value, 400, &mut rng, |imgs| {
        chroma_silr_loss(imgs, &set, grid).unwrap().value
    });
    let t = start.elapsed();
    outcome(
        wa <= 1e-3 && wc <= 1e-3 && ca >= 300 && cc >= 300 && secs(t) < 60.0,
        format!(
            "albedo rel {wa:.2e} ({ca} checked, {ta} ties), chroma rel {wc:.2e} ({cc} checked, {tc} ties), {:.1}s",
            secs(t)
        ),
    )
}

fn add(a: &LinearImage, b: &LinearImage) -> LinearImage {
    let (w, h) = a.dims();
    LinearImage::new(w, h, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

/// Distance between `a` and `b` over the cells where `marker` exceeds 0.01.
fn marked_cell_distance(
    a: &lumina_core::DistVector,
    b: &lumina_core::DistVector,
    marker: &lumina_core::DistVector,
) -> f64 {
    let mut sum = 0.0;
    for (g, m) in a.groups.iter().zip(&marker.groups) {
        let range = g.offset..g.offset + g.count;
        if marker.values[m.offset..m.offset + m.count].iter().any(|v| *v > 0.01) {
            sum += a.values[range.clone()].iter().zip(&b.values[range]).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
    }
    sum.sqrt()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let size = 320;
    let grid = GridSpec::new(16, 16).unwrap();
    let per_pixel = GridSpec::per_pixel(size, size);
    let (mut robust, mut lower, mut cellwise) = (0, 0, 0);
    for seed in 0..20u64 {
        let scene = SceneSpec::sample(300 + seed, 3).unwrap();
        let s = make_set(&scene, 2, 5, 300 + seed, size).unwrap();
        let mask = s.set.mask();
        let (a0, a1) = (&s.ground_truth[0].albedo, &s.ground_truth[1].albedo);
        let highlight = &s.ground_truth[0].highlight;
        let injected = add(a0, highlight);
        let d0 = reorder_transform(a0, grid, mask).unwrap();
        let d1 = reorder_transform(a1, grid, mask).unwrap();
        let dh = reorder_transform(&injected, grid, mask).unwrap();
        if d0.distance(&d1).unwrap() < d0.distance(&dh).unwrap() {
            robust += 1;
        }
        let marker = reorder_transform(highlight, grid, mask).unwrap();
        if marked_cell_distance(&d0, &d1, &marker) < marked_cell_distance(&d0, &dh, &marker) {
            cellwise += 1;
        }
        let pair = [a0.clone(), a1.clone()];
        let cells = albedo_silr_loss(&pair, mask, grid).unwrap().value;
        let pixels = albedo_silr_loss(&pair, mask, per_pixel).unwrap().value;
        if cells < pixels {
            lower += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        robust >= 18 && lower >= 18 && secs(t) < 120.0,
        format!(
            "distance {robust}/20, loss {lower}/20, highlight cells only {cellwise}/20, {:.1}s",
            secs(t)
        ),
    )
}

/// Whether every decompose run of criterion 4 finished without tripping
/// the collapse guard; read by criterion 6.
struct Criterion4 {
    outcome: Outcome,
    guard_clear: bool,
}

fn criterion_4() -> Criterion4 {
    let cfg = OptimConfig::default();
    let mut pass = true;
    let mut guard_clear = true;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let start = Instant::now();
        let scene = SceneSpec::sample(seed, 3).unwrap();
        let s = make_set(&scene, 8, 5, seed, 320).unwrap();
        match decompose(&s.set, &cfg) {
            Ok(r) => {
                let m = evaluate(&r.layers, &s.ground_truth, s.set.mask()).unwrap();
                let t = start.elapsed();
                let (h, a, sh) = (m.mean.highlight.si_mse, m.mean.albedo.si_mse, m.mean.shading.si_mse);
                let ok = h <= 0.01 && a <= 0.02 && sh <= 0.02 && r.l1 < r.l0 && secs(t) <= 600.0;
                pass &= ok;
                lines.push(format!(
                    "seed {seed}: H {h:.2e} A {a:.2e} S {sh:.2e} L1 {:.3e} L0 {:.3e} {:.0}s{}",
                    r.l1,
                    r.l0,
                    secs(t),
                    if ok { "" } else { " (fail)" }
                ));
            }
            Err(e) => {
                pass = false;
                guard_clear &= !matches!(e, lumina_core::Error::Degenerate { .. });
                lines.push(format!("seed {seed}: {e}"));
            }
        }
    }
    Criterion4 {
        outcome: outcome(pass, lines.join("; ")),
        guard_clear,
    }
}

fn masked_mean(images: &[LinearImage], mask: &PixelMask) -> f64 {
    images.iter().map(|i| i.masked_mean(mask)).sum::<f64>() / images.len() as f64
}

fn criterion_5() -> Outcome {
    let cfg = OptimConfig {
        grid: GridSpec::new(8, 8).unwrap(),
        ..OptimConfig::default()
    };
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 101..=103u64 {
        let scene = SceneSpec {
            specular_strength: 0.0,
            ..SceneSpec::sample(seed, 3).unwrap()
        };
        let s = make_set(&scene, 8, 5, seed, 160).unwrap();
        match decompose(&s.set, &cfg) {
            Ok(r) => {
                let highlights: Vec<LinearImage> = r.layers.iter().map(|l| l.highlight.clone()).collect();
                let h = masked_mean(&highlights, s.set.mask());
                let gap = (r.l1 - r.l0).abs() / r.l0;
                let ok = h <= 0.02 && gap <= 0.1;
                pass &= ok;
                lines.push(format!(
                    "seed {seed}: mean H {h:.4} |L1-L0|/L0 {gap:.3} (L1 {:.3e} L0 {:.3e})",
                    r.l1, r.l0
                ));
            }
            Err(e) => {
                pass = false;
                lines.push(format!("seed {seed}: {e}"));
            }
        }
    }
    outcome(pass, lines.join("; "))
}

fn lumina(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumina")).args(args).output().expect("lumina runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn criterion_6(guard_clear: bool) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (set_dir, out) = (dir.path().join("set"), dir.path().join("out"));
    let o = lumina(&["synth", "--views", "8", "--size", "160", "--seed", "201", "--out", p(&set_dir)]);
    if !o.status.success() {
        return outcome(false, format!("synth failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let o = lumina(&[
        "decompose", "--input", p(&set_dir), "--out", p(&out), "--omega", "0", "--lambda-h", "0", "--grid", "8x8",
    ]);
    let note = if guard_clear {
        "omega 1 runs of criterion 4 never tripped the guard"
    } else {
        "an omega 1 run of criterion 4 tripped the guard"
    };
    match o.status.code() {
        Some(3) => outcome(guard_clear, format!("bare contrastive run stopped by the guard (exit 3); {note}")),
        Some(0) => {
            let cfg = OptimConfig {
                omega: 0.0,
                lambda_h: 0.0,
                grid: GridSpec::new(8, 8).unwrap(),
                ..OptimConfig::default()
            };
            let manifest = SetManifest::read(&set_dir).unwrap();
            let set = manifest.load_set(&set_dir, 2.2).unwrap();
            let vars = init_variables(&set, &cfg).unwrap();
            let (vars, _) = phase_h(&set, vars, &cfg).unwrap();
            let (vars, _) = phase_s(&set, vars, &cfg).unwrap();
            let initial = objective(&set, &cfg, Phase::Joint, &vars).unwrap().mean_diffuse;
            let diffuse: Vec<LinearImage> = (0..set.len())
                .map(|i| sidecar::read_image(out.join(format!("diffuse_{i:02}.lum"))).unwrap())
                .collect();
            let last = masked_mean(&diffuse, set.mask());
            let ok = last >= 0.01 * initial;
            outcome(
                ok && guard_clear,
                format!("bare contrastive run finished; diffuse mean {last:.4} vs {initial:.4} at joint start; {note}"),
            )
        }
        code => outcome(
            false,
            format!("unexpected exit {code:?}: {}", String::from_utf8_lossy(&o.stderr)),
        ),
    }
}

/// Independent LMSE: explicit window loops, sums accumulated per window.
fn lmse_oracle(x: &LinearImage, y: &LinearImage, mask: &PixelMask) -> f64 {
    let (w, h) = x.dims();
    let mut per_window = Vec::new();
    let mut y0 = 0;
    while y0 + 20 <= h {
        let mut x0 = 0;
        while x0 + 20 <= w {
            let mut vals = Vec::new();
            for yy in y0..y0 + 20 {
                for xx in x0..x0 + 20 {
                    if mask.get(xx, yy) {
                        let (a, b) = (x.get(xx, yy), y.get(xx, yy));
                        for c in 0..3 {
                            vals.push((a[c], b[c]));
                        }
                    }
                }
            }
            if vals.len() >= 30 {
                let xx: f64 = vals.iter().map(|(a, _)| a * a).sum();
                let xy: f64 = vals.iter().map(|(a, b)| a * b).sum();
                let alpha = if xx == 0.0 { 0.0 } else { xy / xx };
                let err: f64 = vals.iter().map(|(a, b)| (alpha * a - b).powi(2)).sum();
                per_window.push(err / vals.len() as f64);
            }
            x0 += 10;
        }
        y0 += 10;
    }
    per_window.iter().sum::<f64>() / per_window.len() as f64
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (w, h) = (100, 100);
    let mut worst_oracle = 0.0f64;
    let mut worst_zero = 0.0f64;
    for _ in 0..10 {
        let x = random_image(&mut rng, w, h);
        let y = random_image(&mut rng, w, h);
        let keep: f64 = rng.random_range(0.3..1.0);
        let mask = PixelMask::from_fn(w, h, |_, _| rng.random_bool(keep));
        let got = lmse(&x, &y, &mask).unwrap();
        let want = lmse_oracle(&x, &y, &mask);
        worst_oracle = worst_oracle.max((got - want).abs());

        worst_zero = worst_zero
            .max(si_mse(&x, &x, &mask).unwrap())
            .max(dssim(&x, &x, &mask).unwrap())
            .max(lmse(&x, &x, &mask).unwrap())
            .max(si_mse(&x.scaled(3.7).unwrap(), &x, &mask).unwrap());
    }
    // Masked pixels sit only in 10x10 tiles with even tile coordinates, so
    // every 20x20 window at stride 10 sees exactly one tile and a per-tile
    // scale is a per-window scale.
    let tiles = PixelMask::from_fn(w, h, |x, y| (x / 10) % 2 == 0 && (y / 10) % 2 == 0);
    let y = random_image(&mut rng, w, h);
    let scales: Vec<f64> = (0..100).map(|_| rng.random_range(0.2..5.0)).collect();
    let x = LinearImage::from_fn(w, h, |px, py| {
        let k = scales[(py / 10) * 10 + px / 10];
        y.get(px, py).map(|v| v * k)
    })
    .unwrap();
    let windowed = lmse(&x, &y, &tiles).unwrap();
    worst_zero = worst_zero.max(windowed);
    outcome(
        worst_oracle <= 1e-10 && worst_zero <= 1e-12,
        format!("lmse vs oracle {worst_oracle:.2e}, identical/rescaled inputs {worst_zero:.2e}"),
    )
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let mut notes = Vec::new();
    let mut pass = true;

    let synth = |out: &Path| lumina(&["synth", "--views", "4", "--size", "96", "--seed", "8", "--out", p(out)]);
    let (a, b) = (synth(&d("s1")), synth(&d("s2")));
    let same = a.status.success() && b.status.success() && read_dir(&d("s1")) == read_dir(&d("s2"));
    pass &= same;
    notes.push(format!("synth {}", if same { "identical" } else { "differs" }));

    let dec = |out: &Path| {
        lumina(&[
            "decompose", "--input", p(&d("s1")), "--out", p(out), "--grid", "8x8",
            "--highlight-iterations", "40", "--shading-iterations", "40", "--joint-iterations", "40",
        ])
    };
    // stdout names the output directory, so only the artifacts are compared.
    let (a, b) = (dec(&d("d1")), dec(&d("d2")));
    let same = a.status.success() && b.status.success() && read_dir(&d("d1")) == read_dir(&d("d2"));
    pass &= same;
    notes.push(format!("decompose {}", if same { "identical" } else { "differs" }));

    let grad = |out: &Path| lumina(&["gradcheck", "--seed", "3", "--out", p(out)]);
    let (a, b) = (grad(&d("g1")), grad(&d("g2")));
    let same = a.status.success() && b.status.success() && a.stdout == b.stdout && read_dir(&d("g1")) == read_dir(&d("g2"));
    pass &= same;
    notes.push(format!("gradcheck {}", if same { "identical" } else { "differs" }));
    outcome(pass, notes.join(", "))
}

fn selected() -> Option<Vec<u8>> {
    let raw = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(raw.split(',').filter_map(|t| t.trim().parse().ok()).collect())
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only = selected();
    let wanted = |n: u8| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(u8, Outcome)> = Vec::new();
    let mut report = |n: u8, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            println!("criterion {n} {name}: SKIP");
            return;
        }
        let o = run();
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    let mut guard_clear = true;
    report(1, "silr correctness", &mut criterion_1);
    report(2, "sort-transform jacobian", &mut criterion_2);
    report(3, "misalignment robustness", &mut criterion_3);
    report(4, "end-to-end recovery", &mut || {
        let c = criterion_4();
        guard_clear = c.guard_clear;
        c.outcome
    });
    report(5, "lambertian control", &mut criterion_5);
    report(6, "degenerate guard", &mut || criterion_6(guard_clear));
    report(7, "metric sanity", &mut criterion_7);
    report(8, "determinism", &mut criterion_8);
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {}/{} passed", results.len() - failed, results.len());
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
