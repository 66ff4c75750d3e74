//! Acceptance suite.
//!
//! Runs every criterion, prints one `PASS`/`FAIL` line each and exits
//! non-zero if any failed. Oracles are written independently of the
//! library code they check. The end-to-end criteria train three models on
//! a generated 1000/200 shapes set with `configs/synthetic.toml`; expect a
//! few minutes in an optimised build.

// Example values are quoted as printed, rounded to four decimals.
#![allow(clippy::approx_constant)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ilc_core::config::Config;
use ilc_core::datamodel::{partition_categories, CountAnnotation, Grid, Maps, PeakMap, PseudoMask};
use ilc_core::infer::predict;
use ilc_core::losses::{
    class_loss, class_loss_gradient, combine_batch, global_mse_gradient, global_mse_loss, rank_gradient, rank_loss, sp_plus_gradient,
    spatial_negative_gradient, spatial_negative_loss, spatial_positive_loss, ImageTerms,
};
use ilc_core::mask::BinaryMask;
use ilc_core::metrics::{abo, game, game_dataset, map_r, rmse_family, InstanceMask, RmseVariant};
use ilc_core::network::Image;
use ilc_core::peaks::{extract_peaks, pseudo_mask, ClassScores};
use ilc_core::segscore::{select_masks, PeakEvidence, Proposal, ScoreWeights};
use ilc_core::synthdata::{generate, open_dataset};
use ilc_core::train::{initial_checkpoint, train_all, TrainConfig, TrainSample};
use ilc_core::Error;

// Criterion 1
const FD_FIXTURES: usize = 100;
const FD_SIZE: usize = 8;
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-4;
/// Gradients below this magnitude on both sides count as agreeing.
const FD_ABS_FLOOR: f64 = 1e-10;
const FD_TIME_LIMIT: Duration = Duration::from_secs(60);
// Criteria 2, 3
const PEAK_GRIDS: usize = 1000;
const PEAK_MAX_SIDE: usize = 64;
const PSEUDO_MAPS: usize = 1000;
// Criterion 4
const LOSS_ABS_TOL: f64 = 1e-6;
/// Published example values are rounded to four decimals.
const PRINTED_TOL: f64 = 5e-5;
// Criterion 5
const METRIC_FIXTURES: usize = 100;
/// Same-formula oracles compare bitwise; the AP oracle sums in a different
/// order, so it gets this allowance.
const AP_TOL: f64 = 1e-12;
// Criteria 6, 7
const E2E_TRAIN: usize = 1000;
const E2E_TEST: usize = 200;
const MRMSE_MAX: f64 = 0.6;
const BEYOND_RANGE: std::ops::RangeInclusive<u32> = 5..=8;
const BEYOND_MEAN_MIN: f64 = 4.0;
const ABLATION_MARGIN: f64 = 0.02;

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

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a.abs() < FD_ABS_FLOOR && b.abs() < FD_ABS_FLOOR {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

fn central_diff(x: &[f64], k: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[k] += FD_STEP;
    m[k] -= FD_STEP;
    (f(&p) - f(&m)) / (2.0 * FD_STEP)
}

fn random_annotation(rng: &mut ChaCha8Rng, c: usize) -> CountAnnotation {
    let raw: Vec<i64> = (0..c).map(|_| rng.random_range(0..=8)).collect();
    CountAnnotation::from_raw_counts("fixture", &raw, 5).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 5];
    let mut off_mask_nonzero = 0usize;
    let n = FD_SIZE * FD_SIZE;
    for _ in 0..FD_FIXTURES {
        // sp+
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
        b[rng.random_range(0..n)] = 1.0;
        let s_card = rng.random_range(1..=3);
        let mask = PseudoMask {
            values: Grid::from_vec(FD_SIZE, FD_SIZE, b.clone()).unwrap(),
            threshold: 0.0,
        };
        let masked: Vec<f64> = d.iter().zip(&b).map(|(x, m)| x * m).collect();
        let g = sp_plus_gradient(&Grid::from_vec(FD_SIZE, FD_SIZE, masked.clone()).unwrap(), &mask, s_card).unwrap();
        let f = |x: &[f64]| spatial_positive_loss(&Grid::from_vec(FD_SIZE, FD_SIZE, x.to_vec()).unwrap(), &mask, s_card).unwrap();
        for k in 0..n {
            if b[k] == 0.0 {
                off_mask_nonzero += usize::from(g.as_slice()[k] != 0.0);
            } else {
                worst[0] = worst[0].max(rel_err(g.as_slice()[k], central_diff(&masked, k, &f)));
            }
        }

        // sp-
        let a_card = rng.random_range(1..=4);
        let g = spatial_negative_gradient(&Grid::from_vec(FD_SIZE, FD_SIZE, d.clone()).unwrap(), a_card).unwrap();
        let f = |x: &[f64]| spatial_negative_loss(&Grid::from_vec(FD_SIZE, FD_SIZE, x.to_vec()).unwrap(), a_card).unwrap();
        for k in 0..n {
            worst[1] = worst[1].max(rel_err(g.as_slice()[k], central_diff(&d, k, &f)));
        }

        // MSE over predicted counts
        let c = rng.random_range(1..=6);
        let ann = random_annotation(&mut rng, c);
        let part = partition_categories(&ann);
        let t: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..9.0)).collect();
        let g = global_mse_gradient(&t, &ann, &part).unwrap();
        let f = |x: &[f64]| global_mse_loss(x, &ann, &part).unwrap();
        for k in 0..c {
            worst[2] = worst[2].max(rel_err(g[k], central_diff(&t, k, &f)));
        }

        // rank, away from the hinge
        let m = rng.random_range(1..=4);
        let t: Vec<f64> = (0..m)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..10.0);
                if (v - 5.0).abs() < 0.01 {
                    v + 0.02
                } else {
                    v
                }
            })
            .collect();
        let g = rank_gradient(&t, 5.0);
        let f = |x: &[f64]| rank_loss(x, 5.0);
        for k in 0..m {
            worst[3] = worst[3].max(rel_err(g[k], central_diff(&t, k, &f)));
        }

        // class loss over scores
        let s: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let g = class_loss_gradient(&ClassScores(s.clone()), &part).unwrap();
        let f = |x: &[f64]| class_loss(&ClassScores(x.to_vec()), &part).unwrap();
        for k in 0..c {
            worst[4] = worst[4].max(rel_err(g[k], central_diff(&s, k, &f)));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|w| *w <= FD_REL_TOL) && off_mask_nonzero == 0 && elapsed < FD_TIME_LIMIT;
    outcome(
        pass,
        format!(
            "max rel err sp+ {:.1e}, sp- {:.1e}, mse {:.1e}, rank {:.1e}, class {:.1e} (tol {FD_REL_TOL:.0e}); \
             {off_mask_nonzero} nonzero off-mask entries; {:.2?}",
            worst[0], worst[1], worst[2], worst[3], worst[4], elapsed
        ),
    )
}

fn brute_force_peaks(g: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let v = g[i * w + j];
            let mut strict = true;
            for a in 0..h {
                for b in 0..w {
                    if (a, b) != (i, j) && a.abs_diff(i) <= r && b.abs_diff(j) <= r && g[a * w + b] >= v {
                        strict = false;
                    }
                }
            }
            if strict {
                out[i * w + j] = v;
            }
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    let mut peaks_seen = 0usize;
    for k in 0..PEAK_GRIDS {
        let h = rng.random_range(1..=PEAK_MAX_SIDE);
        let w = rng.random_range(1..=PEAK_MAX_SIDE);
        let r = rng.random_range(1..=2);
        let g: Vec<f64> = if k % 2 == 0 {
            (0..h * w).map(|_| f64::from(rng.random_range(0..4u8))).collect()
        } else {
            (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let got = extract_peaks(&Grid::from_vec(h, w, g.clone()).unwrap(), r).unwrap();
        let want = brute_force_peaks(&g, h, w, r);
        peaks_seen += want.iter().filter(|v| **v != 0.0).count();
        if got.values.as_slice() != want.as_slice() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches}/{PEAK_GRIDS} grids differ from the brute-force oracle ({peaks_seen} peaks total)"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let levels = [-1.0, -0.5, 0.5, 1.0, 1.5, 2.0];
    let (mut mismatches, mut tie_cases, mut empty_cases) = (0usize, 0usize, 0usize);
    for k in 0..PSEUDO_MAPS {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let values: Vec<f64> = if k % 2 == 0 {
            (0..h * w)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        levels[rng.random_range(0..levels.len())]
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            let g: Vec<f64> = (0..h * w).map(|_| f64::from(rng.random_range(0..5u8)) - 1.0).collect();
            extract_peaks(&Grid::from_vec(h, w, g).unwrap(), 1).unwrap().values.into_vec()
        };
        let t_c: u32 = rng.random_range(1..=6);
        let peaks = PeakMap {
            values: Grid::from_vec(h, w, values.clone()).unwrap(),
            radius: 1,
        };

        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| *v != 0.0).collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let got = pseudo_mask(&peaks, t_c);
        if sorted.is_empty() {
            empty_cases += 1;
            mismatches += usize::from(!matches!(got, Err(Error::NoPeaks)));
            continue;
        }
        let k = t_c as usize;
        let h_c = if sorted.len() >= k {
            sorted[k - 1]
        } else {
            *sorted.last().unwrap()
        };
        let want: Vec<f64> = values.iter().map(|&v| if v != 0.0 && v >= h_c { 1.0 } else { 0.0 }).collect();
        let passing = want.iter().filter(|v| **v == 1.0).count();
        if passing > k.min(sorted.len()) {
            tie_cases += 1;
        }
        match got {
            Ok(o) if o.mask.values.as_slice() == want.as_slice() && o.mask.threshold == h_c && o.fell_back == (sorted.len() < k) => {}
            _ => mismatches += 1,
        }
    }
    outcome(
        mismatches == 0 && tie_cases > 0,
        format!("{mismatches}/{PSEUDO_MAPS} maps differ from sort-and-threshold; {tie_cases} tie cases, {empty_cases} peakless maps"),
    )
}

fn criterion_4() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    // -log sigma(x) = ln(1 + e^-x)
    let nls = |x: f64| (-x).exp().ln_1p();
    let labels = |raw: &[i64]| CountAnnotation::from_raw_counts("x", raw, 5).unwrap();
    let mask_of = |h: usize, w: usize, v: Vec<f64>| PseudoMask {
        values: Grid::from_vec(h, w, v).unwrap(),
        threshold: 0.0,
    };
    let part = |raw: &[i64]| partition_categories(&labels(raw));
    let terms = |mse: Option<f64>, rank: Option<f64>| ImageTerms {
        class_loss: 0.0,
        mse,
        rank,
        ..ImageTerms::default()
    };

    let one = mask_of(1, 1, vec![1.0]);
    let two = mask_of(1, 2, vec![1.0, 1.0]);
    let cases: Vec<(&str, f64, f64, Option<f64>)> = vec![
        (
            "class, zero scores",
            class_loss(&ClassScores(vec![0.0; 3]), &part(&[0, 2, 7])).unwrap(),
            ln2,
            Some(0.6931),
        ),
        (
            "class, s=[2,-2]",
            class_loss(&ClassScores(vec![2.0, -2.0]), &part(&[1, 0])).unwrap(),
            nls(2.0),
            Some(0.1269),
        ),
        (
            "sp+, single entry",
            spatial_positive_loss(&Grid::zeros(1, 1), &one, 1).unwrap(),
            ln2,
            Some(0.6931),
        ),
        (
            "sp+, entries {0,2}",
            spatial_positive_loss(&Grid::from_vec(1, 2, vec![0.0, 2.0]).unwrap(), &two, 1).unwrap(),
            (ln2 + nls(2.0)) / 2.0,
            Some(0.4100),
        ),
        (
            "sp+ gradient, single entry",
            sp_plus_gradient(&Grid::zeros(1, 1), &one, 1).unwrap().get(0, 0),
            -0.5,
            Some(-0.5),
        ),
        (
            "sp-, 2x2 zeros",
            spatial_negative_loss(&Grid::zeros(2, 2), 1).unwrap(),
            ln2,
            Some(0.6931),
        ),
        (
            "sp-, single 3",
            spatial_negative_loss(&Grid::filled(1, 1, 3.0), 1).unwrap(),
            3.0f64.exp().ln_1p(),
            Some(3.0486),
        ),
        (
            "mse, exact",
            global_mse_loss(&[0.0, 2.0], &labels(&[0, 2]), &part(&[0, 2])).unwrap(),
            0.0,
            None,
        ),
        (
            "mse, 5 vs 3",
            global_mse_loss(&[5.0], &labels(&[3]), &part(&[3])).unwrap(),
            4.0,
            Some(4.0),
        ),
        (
            "mse, A and S",
            global_mse_loss(&[0.5, 2.0], &labels(&[0, 2]), &part(&[0, 2])).unwrap(),
            (0.25 + 0.0) / 2.0,
            Some(0.125),
        ),
        ("rank, 7 vs 5", rank_loss(&[7.0], 5.0), 0.0, Some(0.0)),
        ("rank, 2 vs 5", rank_loss(&[2.0], 5.0), 3.0, Some(3.0)),
        ("rank, {5,4}", rank_loss(&[5.0, 4.0], 5.0), (0.0 + 1.0) / 2.0, Some(0.5)),
        (
            "combine, zeros",
            combine_batch(&[ImageTerms::default()], 0.1).unwrap().total,
            0.0,
            Some(0.0),
        ),
        (
            "combine, rank 1",
            combine_batch(&[terms(None, Some(1.0))], 0.1).unwrap().total,
            0.1,
            Some(0.1),
        ),
        (
            "combine, mse {2,4}",
            combine_batch(&[terms(Some(2.0), None), terms(Some(4.0), None)], 0.1).unwrap().mse,
            3.0,
            Some(3.0),
        ),
    ];
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (name, got, closed, printed) in &cases {
        let err = (got - closed).abs();
        worst = worst.max(err);
        let printed_ok = printed.is_none_or(|p| (closed - p).abs() <= PRINTED_TOL);
        if err > LOSS_ABS_TOL || !printed_ok {
            failures.push(*name);
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} examples, max abs err {worst:.1e} (tol {LOSS_ABS_TOL:.0e}); failing: {failures:?}",
            cases.len()
        ),
    )
}

fn naive_rmse(pred: &[Vec<u32>], truth: &[Vec<u32>], nonzero: bool, relative: bool) -> (Vec<Option<f64>>, f64) {
    let c = truth[0].len();
    let mut per = Vec::new();
    for cat in 0..c {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..truth.len() {
            let t = f64::from(truth[i][cat]);
            if nonzero && truth[i][cat] == 0 {
                continue;
            }
            let e = (t - f64::from(pred[i][cat])).powi(2);
            sum += if relative { e / (t + 1.0) } else { e };
            n += 1;
        }
        per.push((n > 0).then(|| (sum / n as f64).sqrt()));
    }
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per, mean)
}

fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// Cell index of pixel `i` when `len` pixels are cut at floor(k·len/parts).
fn naive_cell(i: usize, len: usize, parts: usize) -> usize {
    ((i + 1) * parts - 1) / len
}

fn naive_game(d: &[f64], h: usize, w: usize, pts: &[(usize, usize)], n: u32) -> f64 {
    let p = 1usize << n;
    let mut total = 0.0;
    for ci in 0..p {
        for cj in 0..p {
            let mut est = 0.0;
            for i in 0..h {
                for j in 0..w {
                    if naive_cell(i, h, p) == ci && naive_cell(j, w, p) == cj {
                        est += d[i * w + j];
                    }
                }
            }
            let count = pts
                .iter()
                .filter(|&&(r, c)| naive_cell(r, h, p) == ci && naive_cell(c, w, p) == cj)
                .count();
            total += (est - count as f64).abs();
        }
    }
    total
}

fn naive_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn gt_categories(truth: &[InstanceMask]) -> Vec<usize> {
    let mut cats: Vec<usize> = truth.iter().map(|t| t.category).collect();
    cats.sort_unstable();
    cats.dedup();
    cats
}

fn naive_abo(pred: &[InstanceMask], truth: &[InstanceMask]) -> f64 {
    let cats = gt_categories(truth);
    if cats.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &cats {
        let mut sum = 0.0;
        let mut n = 0usize;
        for g in truth.iter().filter(|g| g.category == c) {
            let best = pred
                .iter()
                .filter(|p| p.category == c && p.image_id == g.image_id)
                .map(|p| naive_iou(&p.mask, &g.mask))
                .fold(0.0, f64::max);
            sum += best;
            n += 1;
        }
        total += sum / n as f64;
    }
    total / cats.len() as f64
}

fn naive_map(pred: &[InstanceMask], truth: &[InstanceMask], thr: f64) -> f64 {
    let cats = gt_categories(truth);
    if cats.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &cats {
        let gts: Vec<&InstanceMask> = truth.iter().filter(|g| g.category == c).collect();
        let mut order: Vec<(usize, &InstanceMask)> = pred.iter().filter(|p| p.category == c).enumerate().collect();
        order.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        let mut used = vec![false; gts.len()];
        let mut hits = Vec::new();
        for (_, p) in order {
            let mut best: Option<usize> = None;
            let mut best_iou = -1.0;
            for (k, g) in gts.iter().enumerate() {
                if used[k] || g.image_id != p.image_id {
                    continue;
                }
                let iou = naive_iou(&p.mask, &g.mask);
                if iou >= thr && iou > best_iou {
                    best = Some(k);
                    best_iou = iou;
                }
            }
            if let Some(k) = best {
                used[k] = true;
            }
            hits.push(best.is_some());
        }
        // AP = (1/|GT|) Σ over hits of the best precision at that rank or later
        let precision: Vec<f64> = (0..hits.len())
            .map(|k| hits[..=k].iter().filter(|h| **h).count() as f64 / (k + 1) as f64)
            .collect();
        let mut ap = 0.0;
        for k in 0..hits.len() {
            if hits[k] {
                ap += precision[k..].iter().copied().fold(0.0, f64::max);
            }
        }
        total += ap / gts.len() as f64;
    }
    total / cats.len() as f64
}

fn random_rect(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let r0 = rng.random_range(0..h);
    let c0 = rng.random_range(0..w);
    let r1 = rng.random_range(r0 + 1..=h);
    let c1 = rng.random_range(c0 + 1..=w);
    let mut m = BinaryMask::empty(h, w);
    for i in r0..r1 {
        for j in c0..c1 {
            m.set(i, j, true);
        }
    }
    m
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fail = |what: &'static str| *failures.entry(what).or_default() += 1;
    let mut monotone_violations = 0usize;
    for _ in 0..METRIC_FIXTURES {
        // counting errors
        let n = rng.random_range(1..=30);
        let c = rng.random_range(1..=4);
        let truth: Vec<Vec<u32>> = (0..n)
            .map(|_| {
                (0..c)
                    .map(|_| if rng.random_bool(0.4) { 0 } else { rng.random_range(0..=8) })
                    .collect()
            })
            .collect();
        let pred: Vec<Vec<u32>> = (0..n).map(|_| (0..c).map(|_| rng.random_range(0..=9)).collect()).collect();
        for (variant, nz, rel) in [
            (RmseVariant::Rmse, false, false),
            (RmseVariant::RelRmse, false, true),
            (RmseVariant::RmseNz, true, false),
            (RmseVariant::RelRmseNz, true, true),
        ] {
            let got = rmse_family(&pred, &truth, variant).unwrap();
            let (per, mean) = naive_rmse(&pred, &truth, nz, rel);
            if got.per_category != per || !same(got.mean, mean) {
                fail("rmse");
            }
        }

        // GAME on dyadic densities so sums are exact
        let images = rng.random_range(1..=3);
        let cats = rng.random_range(1..=2);
        let h = rng.random_range(1..=24);
        let w = rng.random_range(1..=24);
        let mut dens = Vec::new();
        let mut pts = Vec::new();
        for _ in 0..images {
            let mut di = Vec::new();
            let mut pi = Vec::new();
            for _ in 0..cats {
                let d: Vec<f64> = (0..h * w).map(|_| f64::from(rng.random_range(0..64u8)) / 64.0).collect();
                let p: Vec<(usize, usize)> = (0..rng.random_range(0..=6))
                    .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
                    .collect();
                di.push(Grid::from_vec(h, w, d).unwrap());
                pi.push(p);
            }
            dens.push(di);
            pts.push(pi);
        }
        for level in 0..=3u32 {
            let mut sums = vec![0.0; cats];
            for i in 0..images {
                for cat in 0..cats {
                    let g = game(&dens[i][cat], &pts[i][cat], level).unwrap();
                    let want = naive_game(dens[i][cat].as_slice(), h, w, &pts[i][cat], level);
                    if g != want {
                        fail("game");
                    }
                    if level > 0 && g < game(&dens[i][cat], &pts[i][cat], level - 1).unwrap() {
                        monotone_violations += 1;
                    }
                    sums[cat] += want;
                }
            }
            let report = game_dataset(&dens, &pts, level).unwrap();
            let want_mean = sums.iter().map(|s| s / images as f64).sum::<f64>() / cats as f64;
            if !same(report.mean, want_mean) {
                fail("game dataset");
            }
        }

        // masks
        let (mh, mw) = (8, 8);
        let mut truth_masks = Vec::new();
        let mut pred_masks = Vec::new();
        let scores = [0.2, 0.5, 0.5, 0.9];
        for img in 0..rng.random_range(1..=3) {
            for cat in 0..rng.random_range(1..=3) {
                for _ in 0..rng.random_range(0..=4) {
                    let m = random_rect(&mut rng, mh, mw);
                    truth_masks.push(InstanceMask {
                        image_id: format!("i{img}"),
                        category: cat,
                        score: 1.0,
                        mask: m,
                    });
                }
                for _ in 0..rng.random_range(0..=5) {
                    let m = if rng.random_bool(0.5) && !truth_masks.is_empty() {
                        let base = &truth_masks[rng.random_range(0..truth_masks.len())].mask;
                        base.union(&random_rect(&mut rng, mh, mw)).unwrap()
                    } else {
                        random_rect(&mut rng, mh, mw)
                    };
                    pred_masks.push(InstanceMask {
                        image_id: format!("i{img}"),
                        category: cat,
                        score: scores[rng.random_range(0..scores.len())],
                        mask: m,
                    });
                }
            }
        }
        if abo(&pred_masks, &truth_masks).unwrap() != naive_abo(&pred_masks, &truth_masks) {
            fail("abo");
        }
        for thr in [0.25, 0.5, 0.75] {
            if (map_r(&pred_masks, &truth_masks, thr).unwrap() - naive_map(&pred_masks, &truth_masks, thr)).abs() > AP_TOL {
                fail("mapr");
            }
        }
    }
    outcome(
        failures.is_empty() && monotone_violations == 0,
        format!("{METRIC_FIXTURES} fixtures; oracle mismatches {failures:?}; {monotone_violations} GAME monotonicity violations"),
    )
}

fn rect(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for i in rows {
        for j in cols.clone() {
            m.set(i, j, true);
        }
    }
    m
}

fn criterion_8() -> Outcome {
    // Two touching 5x5 instances; each peak's response is strong on its own
    // instance and weak on the neighbour, as when responses bleed across.
    let (h, w) = (12, 16);
    let left = rect(h, w, 3..8, 3..8);
    let right = rect(h, w, 3..8, 8..13);
    let merged = left.union(&right).unwrap();
    let proposals = vec![
        Proposal::new("instance-1", &left, h, w),
        Proposal::new("instance-2", &right, h, w),
        Proposal::new("merged", &merged, h, w),
    ];
    let mut density = Grid::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            if merged.get(i, j) {
                density.set(i, j, 1.0 / 25.0);
            }
        }
    }
    let background = merged.to_grid().map(|v| 1.0 - v);
    let response = |own: &BinaryMask, other: &BinaryMask| {
        let mut r = Grid::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                r.set(
                    i,
                    j,
                    if own.get(i, j) {
                        0.1
                    } else if other.get(i, j) {
                        0.03
                    } else {
                        0.0
                    },
                );
            }
        }
        r
    };
    let peaks = vec![
        PeakEvidence {
            row: 5,
            col: 5,
            category: 0,
            response: response(&left, &right),
        },
        PeakEvidence {
            row: 5,
            col: 10,
            category: 0,
            response: response(&right, &left),
        },
    ];
    let maps = Maps::from_grids(&[density]).unwrap();
    let pick = |gamma: f64| -> Vec<String> {
        let weights = ScoreWeights {
            gamma,
            ..ScoreWeights::default()
        };
        select_masks(&peaks, &proposals, &maps, std::slice::from_ref(&background), &weights)
            .unwrap()
            .iter()
            .map(|s| s.best.map_or("none".to_string(), |(k, _)| proposals[k].id.clone()))
            .collect()
    };
    let with = pick(ScoreWeights::default().gamma);
    let without = pick(0.0);
    let pass = with == ["instance-1", "instance-2"] && without.iter().any(|p| p == "merged");
    outcome(pass, format!("default gamma picks {with:?}; gamma 0 picks {without:?}"))
}

struct Trained {
    mrmse: f64,
    mrmse_nz: f64,
    beyond_mean: f64,
    beyond_n: usize,
    elapsed: Duration,
}

struct EndToEnd {
    full: Trained,
    class_mse: Trained,
    spatial: Trained,
}

fn train_and_test(
    config: &Config,
    train: &TrainConfig,
    c: usize,
    data: &[TrainSample],
    test: &[(Image, Vec<u32>)],
) -> Result<Trained, String> {
    let start = Instant::now();
    let ck = initial_checkpoint(config.network.build(c), train.seed).map_err(|e| e.to_string())?;
    let (_, s2) = train_all(ck, data, train).map_err(|e| e.to_string())?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let (mut beyond_sum, mut beyond_n) = (0.0, 0usize);
    for (img, raw) in test {
        let p = predict(img, &s2.checkpoint.network).map_err(|e| e.to_string())?;
        for (cat, &t) in raw.iter().enumerate() {
            if BEYOND_RANGE.contains(&t) {
                beyond_sum += f64::from(p.counts[cat]);
                beyond_n += 1;
            }
        }
        pred.push(p.counts);
        truth.push(raw.clone());
    }
    let mrmse = rmse_family(&pred, &truth, RmseVariant::Rmse).map_err(|e| e.to_string())?.mean;
    let mrmse_nz = rmse_family(&pred, &truth, RmseVariant::RmseNz).map_err(|e| e.to_string())?.mean;
    Ok(Trained {
        mrmse,
        mrmse_nz,
        beyond_mean: beyond_sum / beyond_n.max(1) as f64,
        beyond_n,
        elapsed: start.elapsed(),
    })
}

fn end_to_end() -> Result<EndToEnd, String> {
    let config = Config::load(&workspace_root().join("configs/synthetic.toml")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut synth = config.synth.clone();
    synth.num_images = E2E_TRAIN + E2E_TEST;
    synth.test_fraction = E2E_TEST as f64 / synth.num_images as f64;
    let summary = generate(&synth, dir.path()).map_err(|e| e.to_string())?;
    if (summary.num_train, summary.num_test) != (E2E_TRAIN, E2E_TEST) {
        return Err(format!("generated {}/{} images", summary.num_train, summary.num_test));
    }
    let (categories, records) = open_dataset(dir.path(), config.data.beyond_threshold).map_err(|e| e.to_string())?;
    let mut data = Vec::new();
    let mut test = Vec::new();
    for r in records {
        let img = Image::load(&r.path).map_err(|e| e.to_string())?;
        if r.split == "train" {
            data.push(TrainSample {
                image: img,
                annotation: r.annotation,
            });
        } else {
            test.push((img, r.raw_counts));
        }
    }
    let c = categories.len();
    let full = train_and_test(&config, &config.train, c, &data, &test)?;
    let spatial_cfg = TrainConfig {
        lambda_rank: 0.0,
        ..config.train.clone()
    };
    let spatial = train_and_test(&config, &spatial_cfg, c, &data, &test)?;
    let class_mse_cfg = TrainConfig {
        spatial_loss: false,
        ..spatial_cfg
    };
    let class_mse = train_and_test(&config, &class_mse_cfg, c, &data, &test)?;
    Ok(EndToEnd { full, class_mse, spatial })
}

fn criterion_6(e2e: &Result<EndToEnd, String>) -> Outcome {
    match e2e {
        Err(e) => outcome(false, format!("training failed: {e}")),
        Ok(r) => {
            let t = &r.full;
            let pass = t.mrmse <= MRMSE_MAX && t.mrmse_nz.is_finite() && t.beyond_mean >= BEYOND_MEAN_MIN;
            outcome(
                pass,
                format!(
                    "mRMSE {:.4} (max {MRMSE_MAX}); mRMSE-nz {:.4}; mean prediction {:.3} over {} beyond-range cases (min {BEYOND_MEAN_MIN}); trained in {:.0?}",
                    t.mrmse, t.mrmse_nz, t.beyond_mean, t.beyond_n, t.elapsed
                ),
            )
        }
    }
}

fn criterion_7(e2e: &Result<EndToEnd, String>) -> Outcome {
    match e2e {
        Err(e) => outcome(false, format!("training failed: {e}")),
        Ok(r) => {
            let (a, b, c) = (r.class_mse.mrmse, r.spatial.mrmse, r.full.mrmse);
            let pass = a >= b && b >= c && a - c >= ABLATION_MARGIN;
            outcome(
                pass,
                format!(
                    "class+MSE {a:.4} >= +spatial {b:.4} >= +rank {c:.4}; full model gain {:.4} (min {ABLATION_MARGIN})",
                    a - c
                ),
            )
        }
    }
}

fn ilc(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ilc"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("ilc {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn criterion_9() -> Outcome {
    let run = || -> Result<(bool, bool, bool), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
        let config = workspace_root().join("configs/synthetic.toml").to_string_lossy().into_owned();
        let data = p("data");
        ilc(&["--config", &config, "--seed", "11", "gen-synth", "--out", &data, "--images", "48"])?;
        let mut logs = Vec::new();
        let mut dumps = Vec::new();
        for (k, seed) in ["5", "5", "6"].iter().enumerate() {
            let out = p(&format!("run{k}"));
            let common = ["--config", config.as_str(), "--seed", seed];
            let mut train = common.to_vec();
            train.extend([
                "train",
                "--data",
                &data,
                "--out",
                &out,
                "--stage",
                "all",
                "--stage1-epochs",
                "2",
                "--stage2-epochs",
                "2",
            ]);
            ilc(&train)?;
            let ck = format!("{out}/stage2.ilck");
            let dump = format!("{out}/pred.csv");
            let mut pred = common.to_vec();
            pred.extend(["predict", "--checkpoint", &ck, "--data", &data, "--split", "test", "--out", &dump]);
            ilc(&pred)?;
            logs.push(std::fs::read(format!("{out}/loss_log.csv")).map_err(|e| e.to_string())?);
            dumps.push(std::fs::read(&dump).map_err(|e| e.to_string())?);
        }
        Ok((logs[0] == logs[1], dumps[0] == dumps[1], logs[0] != logs[2]))
    };
    match run() {
        Err(e) => outcome(false, e),
        Ok((logs, dumps, seed_matters)) => outcome(
            logs && dumps && seed_matters,
            format!("loss logs identical: {logs}; prediction dumps identical: {dumps}; another seed changes the log: {seed_matters}"),
        ),
    }
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "loss gradients match finite differences", criterion_1()),
        (2, "peak extraction equals the brute-force oracle", criterion_2()),
        (3, "pseudo masks equal sort-and-threshold", criterion_3()),
        (4, "loss closed forms", criterion_4()),
        (5, "metrics equal naive references", criterion_5()),
    ];
    let e2e = end_to_end();
    results.push((6, "end-to-end synthetic counting", criterion_6(&e2e)));
    results.push((7, "ablation trend", criterion_7(&e2e)));
    results.push((8, "density penalty separates adjacent instances", criterion_8()));
    results.push((9, "repeated runs are byte-identical", criterion_9()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, o) in &results {
        println!("{} criterion {id}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
