//! End-to-end acceptance checks, one line per criterion.
//!
//! `cargo test --release -p purify-core --test acceptance` runs everything;
//! pass criterion numbers (`-- 2 3 10`) to run a subset. Criteria 1 and 6-9
//! share one full desk-scale run, and 11 adds a second run from scratch.
//!
//! Every verdict is printed; the exit status reflects failures only when
//! `ACCEPTANCE_STRICT=1` is set, so `cargo test` reports rather than aborts.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use purify_core::defense::{cond_loss_grad, ProtectedSet, BUDGET_TOL};
use purify_core::diffusion::{DenoiserModel, DiffusionSchedule, UNetConfig};
use purify_core::harness::{parse_table, run_experiment, DefenseKind, ExperimentConfig, ExperimentReport, Pipeline, RunOutcome, Table};
use purify_core::image::{Image, Shape};
use purify_core::metrics::{detector_accuracy, embedding_margin};
use purify_core::nn::cast_params;
use purify_core::purification::{bilateral_filter, blend, extract_grids, gridpure, guided_filter, merge_grids, GridPureParams};
use purify_core::rng;
use rand::Rng as _;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn random_image(shape: Shape, r: &mut rng::Rng) -> Image {
    Image::from_fn(shape, |_, _, _| r.random::<f32>())
}

// Budget soundness on the images the full run protected.
fn budget(run: &RunOutcome, root: &Path) -> Verdict {
    let cell = run.report.cell(DefenseKind::Aspl, "none").expect("aspl cell");
    let t0 = Instant::now();
    let (set, _) = ProtectedSet::load(root.join(cell.protected_dir.as_ref().expect("artifacts"))).expect("protected set loads");
    let worst = set.protected().iter().zip(&set.originals).map(|(p, x)| p.max_abs_diff(x).unwrap()).fold(0.0f32, f32::max);
    let secs = t0.elapsed().as_secs_f64();
    let eta = set.budget.eta as f32;
    verdict(eta == 0.05 && set.budget.alpha_step == 0.005 && worst <= eta + BUDGET_TOL && secs < 1.0, format!("{} images, max |delta| = {worst:.7}, check {secs:.3}s", set.originals.len()))
}

// Analytic input gradient against central differences, 1-block model on 4x4.
fn gradient_oracle() -> Verdict {
    let cfg = UNetConfig { height: 4, width: 4, channels: 1, widths: vec![4], time_dim: 8, vocab: 2 };
    let schedule = DiffusionSchedule::standard();
    let h = 1e-3;
    let (mut agree, mut total) = (0, 0);
    let mut r = rng::rng(21);
    for k in 0..12u64 {
        let m = DenoiserModel::new(cfg.clone(), k).unwrap();
        let p = cast_params::<f64>(&m.params);
        let x = Image::from_fn(Shape::new(4, 4, 1), |_, _, _| 0.1 + 0.8 * r.random::<f32>());
        let ts = [r.random_range(0..1000), r.random_range(0..1000)];
        let (_, g) = cond_loss_grad(&m.net, &p, &x, 1, &ts, &schedule, k).unwrap();
        for i in 0..16 {
            let at = |d: f32| {
                let mut y = x.clone();
                y.data_mut()[i] += d;
                cond_loss_grad(&m.net, &p, &y, 1, &ts, &schedule, k).unwrap().0
            };
            let fd = (at(h) - at(-h)) / (2.0 * h as f64);
            total += 1;
            if fd.signum() == (g.data()[i] as f64).signum() {
                agree += 1;
            }
        }
    }
    let rate = agree as f64 / total as f64;
    verdict(rate >= 0.99, format!("sign agreement {agree}/{total} = {:.2}%", 100.0 * rate))
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn bilateral_reference(x: &Image, ss: f64, sr: f64) -> Vec<f64> {
    let (h, w) = (x.height() as isize, x.width() as isize);
    let r = (3.0 * ss).ceil() as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for xx in 0..w {
            let c = x.get(y as usize, xx as usize, 0) as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let q = x.get(clamp(y + dy, h as usize), clamp(xx + dx, w as usize), 0) as f64;
                    let wt = (-((dx * dx + dy * dy) as f64) / (2.0 * ss * ss) - (q - c).powi(2) / (2.0 * sr * sr)).exp();
                    num += wt * q;
                    den += wt;
                }
            }
            out.push(num / den);
        }
    }
    out
}

/// Window means by direct summation.
fn window_mean(v: &[f64], h: usize, w: usize, r: isize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    s += v[clamp(y + dy, h) * w + clamp(x + dx, w)];
                }
            }
            out[y as usize * w + x as usize] = s / ((2 * r + 1) * (2 * r + 1)) as f64;
        }
    }
    out
}

fn guided_reference(guide: &Image, x: &Image, r: isize, eps: f64) -> Vec<f64> {
    let (h, w) = (x.height(), x.width());
    let i: Vec<f64> = guide.data().iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mi = window_mean(&i, h, w, r);
    let mp = window_mean(&p, h, w, r);
    let mip = window_mean(&i.iter().zip(&p).map(|(a, b)| a * b).collect::<Vec<_>>(), h, w, r);
    let mii = window_mean(&i.iter().map(|a| a * a).collect::<Vec<_>>(), h, w, r);
    let a: Vec<f64> = (0..h * w).map(|k| (mip[k] - mi[k] * mp[k]) / ((mii[k] - mi[k] * mi[k]).max(0.0) + eps)).collect();
    let b: Vec<f64> = (0..h * w).map(|k| mp[k] - a[k] * mi[k]).collect();
    let (ma, mb) = (window_mean(&a, h, w, r), window_mean(&b, h, w, r));
    (0..h * w).map(|k| ma[k] * i[k] + mb[k]).collect()
}

fn filter_oracles() -> Verdict {
    let mut r = rng::rng(5);
    let (mut bf, mut gf) = (0.0f64, 0.0f64);
    for n in 0..20 {
        let x = random_image(Shape::new(8, 8, 1), &mut r);
        let (ss, sr) = (0.7 + 0.1 * n as f64, 0.05 + 0.02 * n as f64);
        let got = bilateral_filter(&x, ss, sr).unwrap();
        for (a, b) in got.data().iter().zip(bilateral_reference(&x, ss, sr)) {
            bf = bf.max((*a as f64 - b).abs());
        }
        let guide = if n % 2 == 0 { x.clone() } else { random_image(Shape::new(8, 8, 1), &mut r) };
        let (rad, eps) = (1 + n % 3, [1e-3, 1e-2, 0.1][n % 3]);
        let got = guided_filter(&guide, &x, rad, eps).unwrap();
        for (a, b) in got.data().iter().zip(guided_reference(&guide, &x, rad as isize, eps)) {
            gf = gf.max((*a as f64 - b).abs());
        }
    }
    verdict(bf <= 1e-6 && gf <= 1e-5, format!("max error bilateral {bf:.2e} (tol 1e-6), guided {gf:.2e} (tol 1e-5)"))
}

fn noising_statistics() -> Verdict {
    let s = DiffusionSchedule::standard();
    let t = s.t_max() - 1;
    let ab = s.alpha_bars()[t];
    let x0 = Image::from_vec(Shape::new(2, 2, 1), vec![0.0, 0.3, -0.7, 1.0]).unwrap();
    let n = 10_000;
    let mut r = rng::rng(17);
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..n {
        let eps = rng::gaussian_image(x0.shape(), &mut r);
        let xt = s.forward_noise(&x0, t, &eps).unwrap();
        for (i, &v) in xt.data().iter().enumerate() {
            sum[i] += v as f64;
            sq[i] += (v as f64).powi(2);
        }
    }
    let var_true = 1.0 - ab;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for i in 0..4 {
        let mean = sum[i] / n as f64;
        let var = (sq[i] - n as f64 * mean * mean) / (n - 1) as f64;
        let mean_true = ab.sqrt() * x0.data()[i] as f64;
        worst_mean = worst_mean.max((mean - mean_true).abs() / (var_true / n as f64).sqrt());
        worst_var = worst_var.max((var - var_true).abs() / (var_true * (2.0 / (n - 1) as f64).sqrt()));
    }
    verdict(worst_mean <= 3.0 && worst_var <= 3.0, format!("worst deviation {worst_mean:.2} SE (mean), {worst_var:.2} SE (variance)"))
}

fn grid_algebra() -> Verdict {
    let mut r = rng::rng(8);
    let mut roundtrip = true;
    for (h, w, patch, stride) in [(32, 32, 16, 8), (32, 32, 12, 5), (17, 23, 8, 3), (8, 8, 8, 8), (9, 9, 4, 4)] {
        let x = random_image(Shape::new(h, w, 2), &mut r);
        roundtrip &= merge_grids(&extract_grids(&x, patch, stride).unwrap(), h, w).unwrap() == x;
    }
    let model = DenoiserModel::new(UNetConfig { height: 8, width: 8, channels: 1, widths: vec![4, 8], time_dim: 8, vocab: 2 }, 1).unwrap();
    let schedule = DiffusionSchedule::linear(50, 1e-3, 0.2).unwrap();
    let x = random_image(Shape::new(8, 8, 1), &mut r);
    let p = GridPureParams { patch: 4, stride: 2, gamma: 1.0, outer_iters: 3, t_small: 5 };
    let identity = gridpure(&model, &x, &p, &schedule, 3).unwrap() == x;
    let mut exact = true;
    for (a, b, g) in [(0.75f32, 0.25f32, 0.25), (0.5, 1.0, 0.5), (0.125, 0.875, 0.0), (0.3, 0.9, 1.0), (1.0, 0.0, 0.75)] {
        let pa = Image::filled(Shape::new(4, 4, 1), a);
        let pb = Image::filled(Shape::new(4, 4, 1), b);
        let want = ((1.0 - g) * a as f64 + g * b as f64) as f32;
        exact &= blend(&pa, &pb, g).unwrap().data().iter().all(|&v| v == want);
    }
    verdict(roundtrip && identity && exact, format!("merge(extract) exact: {roundtrip}, gamma=1 identity: {identity}, blend exact: {exact}"))
}

fn surrogates(p: &mut Pipeline) -> Verdict {
    let t0 = Instant::now();
    let (s, _) = p.surrogates().expect("surrogates train");
    let secs = t0.elapsed().as_secs_f64();
    let heldout: Vec<(Image, usize)> = (0..p.images.len()).flat_map(|id| p.images[id][p.config.split.heldout[0]..p.config.split.heldout[1]].iter().map(move |x| (x.clone(), id))).collect();
    let margin = embedding_margin(&s.embedder, &heldout);
    let clean: Vec<Image> = heldout.iter().map(|(x, _)| x.clone()).collect();
    let acc = detector_accuracy(&s.detector, &clean, 99);
    verdict(margin > 0.3 && acc >= 0.95 && secs < 600.0, format!("held-out margin {margin:.3}, detector accuracy {:.1}%, trained in {secs:.0}s", 100.0 * acc))
}

fn sks_ism(report: &ExperimentReport, d: DefenseKind, purifier: &str) -> Option<(f64, Option<f64>)> {
    let c = report.cell(d, purifier)?.condition("sks")?;
    Some((c.metrics.ism?, c.cross_ism))
}

fn seconds_matching(run: &RunOutcome, f: impl Fn(&str) -> bool) -> f64 {
    run.log.stage_seconds.iter().filter(|(l, _)| f(l)).map(|(_, s)| s).sum()
}

fn personalization(run: &RunOutcome) -> Verdict {
    let Some((same, Some(cross))) = sks_ism(&run.report, DefenseKind::None, "none") else { return verdict(false, "clean cell has no ISM") };
    let secs = seconds_matching(run, |l| l == "base" || l.starts_with("finetune none none") || l.starts_with("sample none none"));
    verdict(same - cross > 0.1 && secs < 900.0, format!("same-identity ISM {same:.3}, cross-identity {cross:.3}, difference {:.3}; base + clean cell {secs:.0}s", same - cross))
}

fn defense_efficacy(run: &RunOutcome) -> Verdict {
    let (Some((clean, _)), Some((prot, _))) = (sks_ism(&run.report, DefenseKind::None, "none"), sks_ism(&run.report, DefenseKind::Aspl, "none")) else {
        return verdict(false, "missing ISM");
    };
    let cell = run.report.cell(DefenseKind::Aspl, "none").unwrap();
    let up = cell.input_hf_energy.iter().zip(&run.report.clean_hf_energy).filter(|(p, c)| p > c).count();
    let frac = up as f64 / run.report.clean_hf_energy.len() as f64;
    let secs = seconds_matching(run, |l| l == "base" || l.starts_with("defend aspl") || l.contains(" none none ") || l.contains(" aspl none "));
    verdict(clean - prot >= 0.05 && frac >= 0.9 && secs < 1800.0, format!("ISM clean {clean:.3} vs protected {prot:.3} (drop {:.3}); hf energy up on {up}/{} images; {secs:.0}s", clean - prot, run.report.clean_hf_energy.len()))
}

fn purification(run: &RunOutcome) -> Verdict {
    let (Some((clean, _)), Some((prot, _))) = (sks_ism(&run.report, DefenseKind::None, "none"), sks_ism(&run.report, DefenseKind::Aspl, "none")) else {
        return verdict(false, "missing ISM");
    };
    let gap = clean - prot;
    let mut pass = run.log.seconds < 2700.0;
    let mut detail = Vec::new();
    for p in ["cascade", "diffpure", "gridpure"] {
        let Some((v, _)) = sks_ism(&run.report, DefenseKind::Aspl, p) else {
            pass = false;
            detail.push(format!("{p}: no ISM"));
            continue;
        };
        let gain = v - prot;
        pass &= gain >= 0.05;
        if p == "diffpure" {
            pass &= gap > 0.0 && gain >= 0.5 * gap;
        }
        detail.push(format!("{p} +{gain:.3} ({:.0}% of gap)", 100.0 * gain / gap));
    }
    verdict(pass, format!("{}; full matrix {:.0}s", detail.join(", "), run.log.seconds))
}

const EXPECTED_ROWS: &str = "\
DreamBooth | - | 0.03 | 0.69 | 0.66 | 7.01 | 0.13 | 0.44 | 0.69 | 4.68
Anti-DB | No | 0.27 | 0.40 | 0.1 | 36.9 | 0.9 | 0.19 | 0.25 | 36.6
Anti-DB | BF+GF | 0 | 0.55 | 0.34 | 36.13 | 0.3 | 0.31 | 0.41 | 29.24
Anti-DB | DiffPure | 0 | 0.61 | 0.65 | 10.55 | 0.3 | 0.50 | 0.71 | -2.49
Anti-DB | GridPure | 0 | 0.66 | 0.65 | 46.17 | 0.2 | 0.41 | 0.63 | 17.24
HF-ADB | No | 0 | 0.65 | 0.65 | 27.44 | 0.13 | 0.45 | 0.64 | 32.09
HF-ADB | BF+GF | 0 | 0.65 | 0.66 | 11.33 | 0.1 | 0.43 | 0.65 | 18.26
HF-ADB | DiffPure | 0 | 0.64 | 0.69 | 11.16 | 0.17 | 0.45 | 0.73 | 0.90
HF-ADB | GridPure | 0 | 0.63 | 0.61 | 56.96 | 0.26 | 0.44 | 0.65 | 21.01
SimAC | No | 0.03 | 0.50 | 0.44 | 44.91 | 1 | – | 0.09 | 37.34
SimAC | BF+GF | 0 | 0.71 | 0.68 | 29.41 | 0.13 | 0.45 | 0.62 | 15.32
SimAC | DiffPure | 0 | 0.66 | 0.67 | 8.19 | 0.23 | 0.48 | 0.79 | 0.38
SimAC | GridPure | 0 | 0.67 | 0.66 | 37.85 | 0.3 | 0.44 | 0.68 | 20.58
DisDiff | No | 0.07 | 0.57 | 0.27 | 36.26 | 0.87 | 0.21 | 0.22 | 37.06
DisDiff | BF+GF | 0.03 | 0.70 | 0.69 | 7.81 | 0.17 | 0.47 | 0.66 | 17.23
DisDiff | DiffPure | 0 | 0.67 | 0.68 | 5.62 | 0.23 | 0.45 | 0.76 | -1.51
DisDiff | GridPure | 0 | 0.67 | 0.69 | 34.93 | 0.13 | 0.48 | 0.69 | 19.93";

fn report_fidelity() -> Verdict {
    let t0 = Instant::now();
    let table: Table = serde_json::from_str(include_str!("fixtures/reference_table.json")).unwrap();
    let rows = parse_table(&table.render());
    let secs = t0.elapsed().as_secs_f64();
    let header_ok = rows[0][2].ends_with("FDFR↑") && rows[0][3..6] == ["ISM↓", "SER-FQA↓", "BRISQUE ↑"];
    let expected: Vec<Vec<&str>> = EXPECTED_ROWS.lines().map(|l| l.split(" | ").collect()).collect();
    let mut mismatches = 0;
    for (got, want) in rows[2..].iter().zip(&expected) {
        mismatches += got.iter().zip(want).filter(|(g, w)| g != *w).count() + got.len().abs_diff(want.len());
    }
    mismatches += (rows.len() - 2).abs_diff(expected.len());
    verdict(header_ok && mismatches == 0 && secs < 1.0, format!("{} rows, {mismatches} mismatched cells, rendered in {:.1}ms", rows.len() - 2, 1e3 * secs))
}

fn determinism(first: &Path, config: &ExperimentConfig) -> Verdict {
    let t0 = Instant::now();
    let second = run_experiment(config, false).expect("second run");
    let secs = t0.elapsed().as_secs_f64();
    let a = std::fs::read(first.join("results.json")).unwrap();
    let b = std::fs::read(config.output_dir.join("results.json")).unwrap();
    verdict(a == b && second.log.counters.cache_hits == 0 && second.log.counters.base_trainings == 1 && secs < 2700.0, format!("results files {} ({} bytes), second run {secs:.0}s from scratch", if a == b { "identical" } else { "differ" }, a.len()))
}

const NAMES: [&str; 11] = [
    "budget soundness",
    "gradient oracle",
    "filter oracles",
    "noising statistics",
    "grid algebra",
    "surrogate quality",
    "personalization precondition",
    "defense efficacy",
    "purification breaks defense",
    "report fidelity",
    "determinism",
];

fn main() {
    let mut wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=11).contains(n)).collect();
    if wanted.is_empty() {
        wanted = (1..=11).collect();
    }
    let tmp = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::desk();
    config.output_dir = tmp.path().join("run-a");
    let needs_run = wanted.iter().any(|n| [1, 6, 7, 8, 9, 11].contains(n));
    let mut results: Vec<(usize, Verdict, f64)> = Vec::new();
    let mut record = |n: usize, f: &mut dyn FnMut() -> Verdict| {
        if !wanted.contains(&n) {
            return;
        }
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        println!("criterion {n:>2} {:<28} {} ({secs:.1}s) {}", NAMES[n - 1], if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, v, secs));
    };
    record(2, &mut gradient_oracle);
    record(3, &mut filter_oracles);
    record(4, &mut noising_statistics);
    record(5, &mut grid_algebra);
    record(10, &mut report_fidelity);
    if needs_run {
        let mut pipeline = Pipeline::new(config.clone()).unwrap();
        record(6, &mut || surrogates(&mut pipeline));
        if !wanted.iter().any(|n| [1, 7, 8, 9, 11].contains(n)) {
            return finish(results);
        }
        let run = run_experiment(&config, false);
        match &run {
            Ok(run) => {
                let root = config.output_dir.clone();
                record(1, &mut || budget(run, &root));
                record(7, &mut || personalization(run));
                record(8, &mut || defense_efficacy(run));
                record(9, &mut || purification(run));
                let mut second = config.clone();
                second.output_dir = tmp.path().join("run-b");
                record(11, &mut || determinism(&root, &second));
            }
            Err(e) => {
                for n in [1, 7, 8, 9, 11] {
                    record(n, &mut || verdict(false, format!("full run failed: {e}")));
                }
            }
        }
    }
    finish(results);
}

fn finish(mut results: Vec<(usize, Verdict, f64)>) {
    results.sort_by_key(|r| r.0);
    println!("\nsummary:");
    for (n, v, _) in &results {
        println!("  {} criterion {n:>2} {}", if v.pass { "PASS" } else { "FAIL" }, NAMES[n - 1]);
    }
    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("{} of {} criteria passed, {failed} failed", results.len() - failed, results.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
