//! Brute-force metric oracles shared by the test targets.
#![allow(dead_code)]

use hfr_adapt::metrics::ScoreSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pair counting: P(genuine > impostor) + ½ P(tie).
pub fn auc(s: &ScoreSet) -> f64 {
    let mut half = 0u64;
    for &g in &s.genuine {
        for &i in &s.impostor {
            half += if g > i { 2 } else if g == i { 1 } else { 0 };
        }
    }
    half as f64 / (2 * s.genuine.len() * s.impostor.len()) as f64
}

fn rates(s: &ScoreSet, t: f64) -> (f64, f64) {
    let far = s.impostor.iter().filter(|&&x| x >= t).count() as f64 / s.impostor.len() as f64;
    let frr = s.genuine.iter().filter(|&&x| x < t).count() as f64 / s.genuine.len() as f64;
    (far, frr)
}

/// Threshold sweep over every distinct score; lowest threshold wins ties.
pub fn eer(s: &ScoreSet) -> f64 {
    let mut candidates: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::INFINITY, 0.0);
    for t in candidates {
        let (far, frr) = rates(s, t);
        let gap = (far - frr).abs();
        if gap < best.0 - 1e-12 {
            best = (gap, (far + frr) / 2.0);
        }
    }
    best.1
}

/// Genuine fraction strictly above the (⌊far·I⌋+1)-th largest impostor score.
pub fn vr(s: &ScoreSet, far: f64) -> f64 {
    let mut imp = s.impostor.clone();
    imp.sort_by(|a, b| b.total_cmp(a));
    let k = ((far * imp.len() as f64).floor() as usize).min(imp.len() - 1);
    let tau = imp[k];
    s.genuine.iter().filter(|&&g| g > tau).count() as f64 / s.genuine.len() as f64
}

/// `total` scores split into at least one genuine and one impostor;
/// drawn from a coarse grid when `coarse`, to force ties.
pub fn random_scores(total: usize, coarse: bool, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ng = rng.gen_range(1..total);
    let mut draw = |shift: f64| {
        let v: f64 = rng.gen_range(-1.0..1.0) * 0.6 + shift;
        if coarse {
            (v * 8.0).round() / 8.0
        } else {
            v
        }
    };
    let genuine = (0..ng).map(|_| draw(0.3)).collect();
    let impostor = (0..total - ng).map(|_| draw(-0.1)).collect();
    ScoreSet::new(genuine, impostor)
}
