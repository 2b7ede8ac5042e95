//! Biometric verification and identification metrics.
//!
//! Scores are cosine similarities: higher means more likely the same
//! identity. Threshold conventions:
//!
//! * EER sweeps every distinct score as a threshold τ with
//!   FAR(τ) = #{impostor ≥ τ}/I and FRR(τ) = #{genuine < τ}/G, picks the
//!   lowest τ minimizing |FAR − FRR| and reports (FAR + FRR)/2.
//! * VR@FAR uses the order statistic τ = (k+1)-th largest impostor score
//!   with k = ⌊far · I⌋ and accepts scores strictly above τ.
//! * Rank-1 breaks ties in favour of the lowest gallery index.

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::cosine;

/// The standard reporting operating points.
pub const FAR_TARGETS: [f64; 4] = [5e-2, 1e-2, 1e-3, 1e-4];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        Self { genuine, impostor }
    }

    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() {
            return Err(Error::EmptyInput("genuine scores"));
        }
        if self.impostor.is_empty() {
            return Err(Error::EmptyInput("impostor scores"));
        }
        Ok(())
    }

    /// Genuine and impostor roles exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.impostor.clone(), self.genuine.clone())
    }
}

/// Embeddings of one side of a comparison, row-major `len × dim`, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbeddings {
    pub data: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<u32>,
}

impl LabeledEmbeddings {
    pub fn new(data: Vec<f64>, dim: usize, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(Error::Dimension {
                op: "embeddings",
                axis: "rows",
                expected: labels.len() * dim,
                got: data.len(),
            });
        }
        Ok(Self { data, dim, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Gallery × probe cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub gallery: usize,
    pub probes: usize,
    /// Row-major, `sim[g * probes + p]`.
    pub sim: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, g: usize, p: usize) -> f64 {
        self.sim[g * self.probes + p]
    }
}

/// All-pairs cosine scores; same-label entries are genuine, the rest impostor.
pub fn score_matrix(gallery: &LabeledEmbeddings, probe: &LabeledEmbeddings) -> Result<(ScoreSet, SimilarityMatrix)> {
    if gallery.dim != probe.dim {
        return Err(Error::Dimension {
            op: "score_matrix",
            axis: "embedding dim",
            expected: gallery.dim,
            got: probe.dim,
        });
    }
    let mut scores = ScoreSet::default();
    let mut sim = Vec::with_capacity(gallery.len() * probe.len());
    for g in 0..gallery.len() {
        for p in 0..probe.len() {
            let s = cosine(gallery.row(g), probe.row(p))?;
            sim.push(s);
            if gallery.labels[g] == probe.labels[p] {
                scores.genuine.push(s);
            } else {
                scores.impostor.push(s);
            }
        }
    }
    Ok((
        scores,
        SimilarityMatrix {
            gallery: gallery.len(),
            probes: probe.len(),
            sim,
        },
    ))
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Mann-Whitney AUC: P(genuine > impostor) + ½ P(tie).
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    let imp = sorted(&scores.impostor);
    // count in half-units so the sum stays an exact integer
    let mut half_wins: u128 = 0;
    for &g in &scores.genuine {
        let below = imp.partition_point(|&x| x < g);
        let not_above = imp.partition_point(|&x| x <= g);
        half_wins += 2 * below as u128 + (not_above - below) as u128;
    }
    let total = 2 * scores.genuine.len() as u128 * imp.len() as u128;
    Ok(half_wins as f64 / total as f64)
}

/// Equal error rate, see the module docs for the threshold convention.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    let gen = sorted(&scores.genuine);
    let imp = sorted(&scores.impostor);
    let (ng, ni) = (gen.len() as i128, imp.len() as i128);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    // FAR = fa/ni, FRR = fr/ng; compare |fa·ng − fr·ni| exactly
    let mut best: Option<(i128, i128, i128)> = None;
    for &t in &thresholds {
        let fa = (imp.len() - imp.partition_point(|&x| x < t)) as i128;
        let fr = gen.partition_point(|&x| x < t) as i128;
        let gap = (fa * ng - fr * ni).abs();
        if best.map_or(true, |(b, _, _)| gap < b) {
            best = Some((gap, fa, fr));
        }
    }
    let (_, fa, fr) = best.expect("at least one threshold");
    Ok((fa as f64 / ni as f64 + fr as f64 / ng as f64) / 2.0)
}

/// Verification rate at a calibrated threshold, with the realized FAR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VrPoint {
    pub far_target: f64,
    pub vr: f64,
    pub realized_far: f64,
    pub threshold: f64,
}

pub fn vr_at_far(scores: &ScoreSet, far_target: f64) -> Result<VrPoint> {
    scores.check()?;
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::OutOfRange {
            what: "far_target",
            value: far_target,
            range: "(0, 1)",
        });
    }
    let ni = scores.impostor.len();
    let mut desc = scores.impostor.clone();
    desc.sort_by(|a, b| b.total_cmp(a));
    let k = ((far_target * ni as f64).floor() as usize).min(ni - 1);
    let tau = desc[k];
    let above = |v: &[f64]| v.iter().filter(|&&s| s > tau).count() as f64 / v.len() as f64;
    Ok(VrPoint {
        far_target,
        vr: above(&scores.genuine),
        realized_far: above(&scores.impostor),
        threshold: tau,
    })
}

/// Fraction of probes whose best-matching gallery entry has their label.
pub fn rank1(sim: &SimilarityMatrix, gallery_labels: &[u32], probe_labels: &[u32]) -> Result<f64> {
    if gallery_labels.len() != sim.gallery || probe_labels.len() != sim.probes {
        return Err(Error::Dimension {
            op: "rank1",
            axis: "labels",
            expected: sim.gallery * sim.probes,
            got: gallery_labels.len() * probe_labels.len(),
        });
    }
    if sim.probes == 0 {
        return Err(Error::EmptyInput("probes"));
    }
    let mut hits = 0usize;
    for (p, &label) in probe_labels.iter().enumerate() {
        if !gallery_labels.contains(&label) {
            return Err(Error::MissingIdentity(label));
        }
        let mut best = 0;
        for g in 1..sim.gallery {
            if sim.get(g, p) > sim.get(best, p) {
                best = g;
            }
        }
        hits += usize::from(gallery_labels[best] == label);
    }
    Ok(hits as f64 / sim.probes as f64)
}

/// Metrics of one evaluation fold.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub eer: f64,
    pub rank1: f64,
    pub vr_at_far: Vec<VrPoint>,
}

impl EvalReport {
    /// Computes every metric for the given gallery and probes.
    pub fn compute(gallery: &LabeledEmbeddings, probe: &LabeledEmbeddings, far_targets: &[f64]) -> Result<Self> {
        let (scores, sim) = score_matrix(gallery, probe)?;
        Ok(Self {
            auc: auc(&scores)?,
            eer: eer(&scores)?,
            rank1: rank1(&sim, &gallery.labels, &probe.labels)?,
            vr_at_far: far_targets
                .iter()
                .map(|&f| vr_at_far(&scores, f))
                .collect::<Result<_>>()?,
        })
    }

    pub fn vr(&self, far: f64) -> Option<f64> {
        self.vr_at_far.iter().find(|p| p.far_target == far).map(|p| p.vr)
    }
}

/// `"{:e}"` spelling used for FAR keys, e.g. 0.01 → "1e-2".
pub fn far_key(far: f64) -> String {
    format!("{far:e}")
}

struct FarMap<'a>(&'a [(f64, f64)]);

impl Serialize for FarMap<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (far, v) in self.0 {
            map.serialize_entry(&far_key(*far), v)?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    auc: f64,
    eer: f64,
    rank1: f64,
    vr_at_far: FarMap<'a>,
}

impl Serialize for EvalReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let vr: Vec<(f64, f64)> = self.vr_at_far.iter().map(|p| (p.far_target, p.vr)).collect();
        let realized: Vec<(f64, f64)> = self.vr_at_far.iter().map(|p| (p.far_target, p.realized_far)).collect();
        let mut map = s.serialize_map(Some(5))?;
        map.serialize_entry("auc", &self.auc)?;
        map.serialize_entry("eer", &self.eer)?;
        map.serialize_entry("rank1", &self.rank1)?;
        map.serialize_entry("vr_at_far", &FarMap(&vr))?;
        map.serialize_entry("realized_far", &FarMap(&realized))?;
        map.end()
    }
}

/// Per-metric mean and sample standard deviation across folds.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSummary {
    pub n_folds: usize,
    pub mean: MetricVector,
    pub std: MetricVector,
    pub folds: Vec<EvalReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricVector {
    pub auc: f64,
    pub eer: f64,
    pub rank1: f64,
    pub vr_at_far: Vec<(f64, f64)>,
}

impl MetricVector {
    pub fn vr(&self, far: f64) -> Option<f64> {
        self.vr_at_far.iter().find(|(f, _)| *f == far).map(|(_, v)| *v)
    }
}

impl Serialize for MetricVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MetricsJson {
            auc: self.auc,
            eer: self.eer,
            rank1: self.rank1,
            vr_at_far: FarMap(&self.vr_at_far),
        }
        .serialize(s)
    }
}

impl Serialize for FoldSummary {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(4))?;
        map.serialize_entry("n_folds", &self.n_folds)?;
        map.serialize_entry("mean", &self.mean)?;
        map.serialize_entry("std", &self.std)?;
        map.serialize_entry("folds", &self.folds)?;
        map.end()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_folds(reports: &[EvalReport]) -> Result<FoldSummary> {
    let first = reports.first().ok_or(Error::EmptyInput("fold reports"))?;
    let column = |f: &dyn Fn(&EvalReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (auc_m, auc_s) = column(&|r| r.auc);
    let (eer_m, eer_s) = column(&|r| r.eer);
    let (r1_m, r1_s) = column(&|r| r.rank1);
    let mut vr_m = Vec::new();
    let mut vr_s = Vec::new();
    for (i, point) in first.vr_at_far.iter().enumerate() {
        let (m, s) = column(&|r| r.vr_at_far[i].vr);
        vr_m.push((point.far_target, m));
        vr_s.push((point.far_target, s));
    }
    Ok(FoldSummary {
        n_folds: reports.len(),
        mean: MetricVector {
            auc: auc_m,
            eer: eer_m,
            rank1: r1_m,
            vr_at_far: vr_m,
        },
        std: MetricVector {
            auc: auc_s,
            eer: eer_s,
            rank1: r1_s,
            vr_at_far: vr_s,
        },
        folds: reports.to_vec(),
    })
}
