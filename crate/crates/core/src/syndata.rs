//! Deterministic two-modality synthetic identity dataset.
//!
//! Each identity is a latent vector. The source modality renders it as a
//! three-channel image of Gaussian blobs and a plane-wave stripe pattern
//! with latent-dependent channel mixing. The target modality renders the
//! same geometry collapsed to one channel, gamma-bent, overlaid with a
//! fixed column pattern and box-blurred, with a different noise law.
//! Every random draw comes from a stream keyed by (dataset seed, identity,
//! modality, sample), so images do not depend on rendering order.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const LATENT_DIM: usize = 8;

/// Stream tags mixed into RNG seeds.
const TAG_LATENT: u64 = 0x4c41_5445_4e54;
const TAG_NOISE: u64 = 0x4e4f_4953_45;
const TAG_PAIRS: u64 = 0x5041_4952_53;
const TAG_FOLDS: u64 = 0x464f_4c44_53;
/// The latent-to-pattern projection is the same for every dataset.
const PROJECTION_SEED: u64 = 0x5052_4f4a;
const N_SHAPE: usize = 18;

const SOURCE_NOISE_STD: f64 = 0.06;
const TARGET_NOISE_HALF_WIDTH: f64 = 0.12;
const NUISANCE_AMPLITUDE: f64 = 0.12;
const TARGET_GAMMA: f64 = 1.5;
/// Amplitude of the sensor's fixed per-column offset pattern.
const COLUMN_PATTERN_AMPLITUDE: f64 = 0.2;
const COLUMN_PATTERN_SEED: u64 = 0xf9f9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Source,
    Target,
}

impl Modality {
    fn tag(self) -> u64 {
        match self {
            Modality::Source => 1,
            Modality::Target => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Source => "source",
            Modality::Target => "target",
        }
    }
}

/// splitmix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0u64, |acc, &p| mix(acc ^ p));
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: u32,
    pub latent: Vec<f64>,
}

impl IdentitySpec {
    pub fn new(dataset_seed: u64, id: u32) -> Self {
        let mut rng = stream(&[dataset_seed, TAG_LATENT, u64::from(id)]);
        let latent = (0..LATENT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { id, latent }
    }
}

/// Geometry of one identity, squashed into bounded ranges.
struct Shape {
    blobs: [(f64, f64, f64, f64); 3],
    stripe_dir: (f64, f64),
    stripe_freq: f64,
    stripe_phase: f64,
    mix: [(f64, f64); 3],
}

fn projection() -> Vec<[f64; LATENT_DIM]> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let scale = 1.0 / (LATENT_DIM as f64).sqrt();
    (0..N_SHAPE)
        .map(|_| {
            let mut row = [0.0; LATENT_DIM];
            row.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0) * scale * 1.7);
            row
        })
        .collect()
}

impl Shape {
    fn from_latent(latent: &[f64]) -> Self {
        let p: Vec<f64> = projection()
            .iter()
            .map(|row| row.iter().zip(latent).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect();
        let c = IMAGE_SIZE as f64 / 2.0;
        let blob = |i: usize, sign: f64| {
            (
                c + 9.0 * p[3 * i],
                c + 9.0 * p[3 * i + 1],
                3.5 + 2.0 * p[3 * i + 2],
                sign,
            )
        };
        let angle = std::f64::consts::PI * p[9];
        Shape {
            blobs: [blob(0, 1.0), blob(1, -1.0), blob(2, 1.0)],
            stripe_dir: (angle.cos(), angle.sin()),
            stripe_freq: 0.55 + 0.3 * p[10],
            stripe_phase: std::f64::consts::PI * p[11],
            mix: [
                (0.8 + 0.5 * p[12], 0.5 + 0.4 * p[13]),
                (0.8 + 0.5 * p[14], 0.5 + 0.4 * p[15]),
                (0.8 + 0.5 * p[16], 0.5 + 0.4 * p[17]),
            ],
        }
    }

    /// Blob field and stripe field at a pixel.
    fn fields(&self, x: f64, y: f64) -> (f64, f64) {
        let blob: f64 = self
            .blobs
            .iter()
            .map(|&(cx, cy, s, sign)| {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                sign * (-r2 / (2.0 * s * s)).exp()
            })
            .sum();
        let u = x * self.stripe_dir.0 + y * self.stripe_dir.1;
        let stripe = (self.stripe_freq * u + self.stripe_phase).cos();
        (blob, stripe)
    }
}

/// Noise-free source image, 3×S×S, unclipped.
fn source_pixels(shape: &Shape) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let mut img = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (blob, stripe) = shape.fields(x as f64, y as f64);
            for (c, &(wb, ws)) in shape.mix.iter().enumerate() {
                img[c * n * n + y * n + x] = 0.5 + 0.3 * wb * blob + 0.12 * ws * stripe;
            }
        }
    }
    img
}

/// Noise-free target image, 1×S×S: channel mean, gamma, column pattern, 3×3 box blur.
fn target_pixels(shape: &Shape) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let src = source_pixels(shape);
    let gray: Vec<f64> = (0..n * n)
        .map(|i| {
            let m = (src[i] + src[n * n + i] + src[2 * n * n + i]) / 3.0;
            m.clamp(0.0, 1.0).powf(TARGET_GAMMA)
        })
        .collect();
    let mut out = vec![0.0; n * n];
    let mut rng = ChaCha8Rng::seed_from_u64(COLUMN_PATTERN_SEED);
    let cols: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<bool>() { COLUMN_PATTERN_AMPLITUDE } else { -COLUMN_PATTERN_AMPLITUDE })
        .collect();
    for y in 0..n {
        for x in 0..n {
            let mut acc = cols[x] * 9.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, n as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, n as i64 - 1) as usize;
                    acc += gray[yy * n + xx];
                }
            }
            out[y * n + x] = acc / 9.0;
        }
    }
    out
}

/// Smooth additive nuisance field: one broad bump of random sign and position.
fn nuisance(rng: &mut ChaCha8Rng) -> impl Fn(f64, f64) -> f64 {
    let n = IMAGE_SIZE as f64;
    let (cx, cy) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
    let amp = rng.gen_range(-NUISANCE_AMPLITUDE..NUISANCE_AMPLITUDE);
    let s = rng.gen_range(5.0..10.0);
    move |x, y| amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
}

/// Noise-free render: 3×S×S for source, 1×S×S for target.
pub fn render_clean(identity: &IdentitySpec, modality: Modality) -> Tensor {
    let n = IMAGE_SIZE;
    let shape = Shape::from_latent(&identity.latent);
    match modality {
        Modality::Source => Tensor::new(vec![3, n, n], source_pixels(&shape)).unwrap(),
        Modality::Target => Tensor::new(vec![1, n, n], target_pixels(&shape)).unwrap(),
    }
}

/// Renders one capture. `sample_seed` drives only the additive noise.
pub fn render(identity: &IdentitySpec, modality: Modality, dataset_seed: u64, sample_seed: u64) -> Tensor {
    let n = IMAGE_SIZE;
    let mut rng = stream(&[
        dataset_seed,
        TAG_NOISE,
        u64::from(identity.id),
        modality.tag(),
        sample_seed,
    ]);
    let mut img = render_clean(identity, modality);
    let field = nuisance(&mut rng);
    let channels = img.shape()[0];
    let gauss = Normal::new(0.0, SOURCE_NOISE_STD).unwrap();
    for c in 0..channels {
        for y in 0..n {
            for x in 0..n {
                let v = &mut img.data_mut()[c * n * n + y * n + x];
                let noise = match modality {
                    Modality::Source => gauss.sample(&mut rng),
                    Modality::Target => rng.gen_range(-TARGET_NOISE_HALF_WIDTH..TARGET_NOISE_HALF_WIDTH),
                };
                *v = (*v + field(x as f64, y as f64) + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// (identity, modality, sample index) address of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SampleRef {
    pub id: u32,
    pub modality: Modality,
    pub sample: u32,
}

/// Pre-rendered backbone inputs. Transparent: it never changes what
/// `Dataset::image` returns, so it takes no part in equality.
#[derive(Clone, Default)]
struct ImageCache(Option<Arc<HashMap<SampleRef, Vec<f64>>>>);

impl PartialEq for ImageCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl std::fmt::Debug for ImageCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageCache({} images)", self.0.as_ref().map_or(0, |m| m.len()))
    }
}

/// Dataset over a fixed set of identities, rendered on demand unless
/// [`Dataset::cached`] was called.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    seed: u64,
    ids: Vec<u32>,
    samples_per_id: usize,
    cache: ImageCache,
}

/// Dataset over identities `0..n_ids`.
pub fn make_dataset(n_ids: usize, samples_per_id_per_modality: usize, dataset_seed: u64) -> Result<Dataset> {
    if n_ids < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 identities, got {n_ids}")));
    }
    if samples_per_id_per_modality == 0 {
        return Err(Error::InvalidConfig("samples_per_id must be positive".into()));
    }
    Ok(Dataset {
        seed: dataset_seed,
        ids: (0..n_ids as u32).collect(),
        samples_per_id: samples_per_id_per_modality,
        cache: ImageCache::default(),
    })
}

impl Dataset {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn samples_per_id(&self) -> usize {
        self.samples_per_id
    }

    /// Restriction to a subset of identities (same seed, same images).
    pub fn subset(&self, ids: impl IntoIterator<Item = u32>) -> Dataset {
        let ids: BTreeSet<u32> = ids.into_iter().collect();
        Dataset {
            seed: self.seed,
            ids: ids.into_iter().collect(),
            samples_per_id: self.samples_per_id,
            cache: self.cache.clone(),
        }
    }

    /// A dataset over identities `start..start + n` with the same seed.
    pub fn with_id_range(&self, start: u32, n: usize) -> Dataset {
        Dataset {
            seed: self.seed,
            ids: (start..start + n as u32).collect(),
            samples_per_id: self.samples_per_id,
            cache: ImageCache::default(),
        }
    }

    /// The same dataset with every image rendered once up front.
    pub fn cached(&self) -> Dataset {
        if self.cache.0.is_some() {
            return self.clone();
        }
        let map = self.entries().into_iter().map(|r| (r, self.render_input(r))).collect();
        Dataset {
            cache: ImageCache(Some(Arc::new(map))),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len() * 2 * self.samples_per_id
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn identity(&self, id: u32) -> IdentitySpec {
        IdentitySpec::new(self.seed, id)
    }

    /// Every (identity, modality, sample) triple in canonical order.
    pub fn entries(&self) -> Vec<SampleRef> {
        let mut out = Vec::with_capacity(self.len());
        for &id in &self.ids {
            for modality in [Modality::Source, Modality::Target] {
                for sample in 0..self.samples_per_id as u32 {
                    out.push(SampleRef { id, modality, sample });
                }
            }
        }
        out
    }

    fn render_input(&self, r: SampleRef) -> Vec<f64> {
        let img = render(&self.identity(r.id), r.modality, self.seed, u64::from(r.sample));
        match r.modality {
            Modality::Source => img.data().to_vec(),
            Modality::Target => img.data().repeat(3),
        }
    }

    fn with_input<T>(&self, r: SampleRef, f: impl FnOnce(&[f64]) -> T) -> T {
        match self.cache.0.as_ref().and_then(|m| m.get(&r)) {
            Some(v) => f(v),
            None => f(&self.render_input(r)),
        }
    }

    /// One image as the backbone sees it: 3×S×S, target replicated across channels.
    pub fn image(&self, r: SampleRef) -> Tensor {
        let n = IMAGE_SIZE;
        Tensor::new(vec![3, n, n], self.with_input(r, <[f64]>::to_vec)).unwrap()
    }

    /// Stacks images into an N×3×S×S batch.
    pub fn batch(&self, refs: &[SampleRef]) -> Tensor {
        let n = IMAGE_SIZE;
        let mut data = Vec::with_capacity(refs.len() * 3 * n * n);
        for &r in refs {
            self.with_input(r, |v| data.extend_from_slice(v));
        }
        Tensor::new(vec![refs.len(), 3, n, n], data).expect("batch needs at least one image")
    }

    /// Writes images as raw little-endian f32 plus a CSV manifest with
    /// columns `id,modality,sample,offset` (offset in bytes).
    pub fn export(&self, refs: &[SampleRef], blob: &Path, manifest: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(blob)?);
        let mut wtr = csv::Writer::from_path(manifest)?;
        wtr.write_record(["id", "modality", "sample", "offset"])?;
        let mut offset = 0u64;
        for &r in refs {
            let img = self.image(r);
            for &v in img.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
            wtr.write_record([
                r.id.to_string(),
                r.modality.as_str().to_string(),
                r.sample.to_string(),
                offset.to_string(),
            ])?;
            offset += img.numel() as u64 * 4;
        }
        out.flush()?;
        wtr.flush()?;
        Ok(())
    }
}

/// Aligned pairs with same-identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x_source: Tensor,
    pub x_target: Tensor,
    pub y: Vec<u8>,
    pub source_refs: Vec<SampleRef>,
    pub target_refs: Vec<SampleRef>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Cross-modal pairs (source vs target).
pub fn sample_pairs(dataset: &Dataset, batch_size: usize, positive_fraction: f64, rng_seed: u64) -> Result<PairBatch> {
    sample_pairs_between(
        dataset,
        (Modality::Source, Modality::Target),
        batch_size,
        positive_fraction,
        rng_seed,
    )
}

/// `round(batch_size · positive_fraction)` same-identity pairs, the rest
/// different-identity pairs, in shuffled order. For same-modality pairs the
/// two sides of a positive use distinct samples when more than one exists.
pub fn sample_pairs_between(
    dataset: &Dataset,
    modalities: (Modality, Modality),
    batch_size: usize,
    positive_fraction: f64,
    rng_seed: u64,
) -> Result<PairBatch> {
    if dataset.ids.len() < 2 {
        return Err(Error::InvalidConfig("pair sampling needs at least 2 identities".into()));
    }
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!("batch_size must be >= 2, got {batch_size}")));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::OutOfRange {
            what: "positive_fraction",
            value: positive_fraction,
            range: "(0, 1)",
        });
    }
    let mut rng = stream(&[dataset.seed, TAG_PAIRS, rng_seed]);
    let n_pos = (batch_size as f64 * positive_fraction).round() as usize;
    let spi = dataset.samples_per_id as u32;
    let mut labels: Vec<u8> = (0..batch_size).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    let (mut src, mut tgt) = (Vec::with_capacity(batch_size), Vec::with_capacity(batch_size));
    for &y in &labels {
        let a = *dataset.ids.choose(&mut rng).unwrap();
        let b = if y == 1 {
            a
        } else {
            loop {
                let b = *dataset.ids.choose(&mut rng).unwrap();
                if b != a {
                    break b;
                }
            }
        };
        let sa = rng.gen_range(0..spi);
        let mut sb = rng.gen_range(0..spi);
        if y == 1 && modalities.0 == modalities.1 && spi > 1 {
            while sb == sa {
                sb = rng.gen_range(0..spi);
            }
        }
        src.push(SampleRef { id: a, modality: modalities.0, sample: sa });
        tgt.push(SampleRef { id: b, modality: modalities.1, sample: sb });
    }
    Ok(PairBatch {
        x_source: dataset.batch(&src),
        x_target: dataset.batch(&tgt),
        y: labels,
        source_refs: src,
        target_refs: tgt,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train_ids: BTreeSet<u32>,
    pub eval_ids: BTreeSet<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProtocolSplit {
    pub folds: Vec<Fold>,
}

/// Identity-disjoint folds over `0..n_ids`. With `n_folds ≥ 2` the shuffled
/// identities are cut into `n_folds` near-equal chunks and each chunk is one
/// fold's evaluation set. With one fold, the first half of the shuffle is
/// evaluated and the rest trained on.
pub fn make_folds(n_ids: usize, n_folds: usize, seed: u64) -> Result<ProtocolSplit> {
    if n_folds == 0 || n_ids < 2 * n_folds {
        return Err(Error::InvalidConfig(format!(
            "{n_ids} identities cannot form {n_folds} folds (need n_ids >= 2 * n_folds)"
        )));
    }
    let mut ids: Vec<u32> = (0..n_ids as u32).collect();
    ids.shuffle(&mut stream(&[seed, TAG_FOLDS]));
    let chunks: Vec<&[u32]> = if n_folds == 1 {
        vec![&ids[..n_ids / 2]]
    } else {
        let (q, r) = (n_ids / n_folds, n_ids % n_folds);
        let mut start = 0;
        (0..n_folds)
            .map(|f| {
                let len = q + usize::from(f < r);
                let c = &ids[start..start + len];
                start += len;
                c
            })
            .collect()
    };
    let folds = chunks
        .into_iter()
        .map(|eval| {
            let eval_ids: BTreeSet<u32> = eval.iter().copied().collect();
            let train_ids = ids.iter().copied().filter(|i| !eval_ids.contains(i)).collect();
            Fold { train_ids, eval_ids }
        })
        .collect();
    Ok(ProtocolSplit { folds })
}
