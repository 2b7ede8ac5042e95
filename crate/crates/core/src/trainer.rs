//! Source pretraining, teacher/student adaptation, and evaluation.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, Objective};
use crate::metrics::{self, EvalReport, LabeledEmbeddings};
use crate::gradcore::Tensor;
use crate::miniedge::{BackboneConfig, Model};
use crate::partition::{self, AdaptConfig, PartitionReport};
use crate::syndata::{self, Dataset, Modality, SampleRef};

/// Bias-corrected Adam without weight decay. Moments exist only for
/// parameters that were trainable when the optimizer was created.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new(model: &Model, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: model
                .params()
                .iter()
                .map(|p| p.trainable.then(|| (vec![0.0; p.tensor.numel()], vec![0.0; p.tensor.numel()])))
                .collect(),
        }
    }

    pub fn moments(&self, index: usize) -> Option<(&[f64], &[f64])> {
        self.moments[index].as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update. `grads[i]` must be present for every parameter with moments.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<&[f64]>]) -> Result<()> {
        if grads.len() != self.moments.len() {
            return Err(Error::TopologyMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.moments.len()
            )));
        }
        for (p, g) in model.params().iter().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), mom) in model.params_mut().iter_mut().zip(grads).zip(&mut self.moments) {
            let Some((m, v)) = mom.as_mut() else { continue };
            let g = g.ok_or_else(|| Error::TopologyMismatch(format!("missing gradient for {}", p.name)))?;
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Applies the objective's parameter gradients.
    fn apply(&mut self, model: &mut Model, objective: &Objective) -> Result<()> {
        let grads: Vec<Option<&[f64]>> = objective
            .params
            .iter()
            .zip(model.params())
            .map(|(&id, p)| if p.trainable { objective.graph.grad(id) } else { None })
            .collect();
        self.step(model, &grads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub sampler: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 42,
            init: 42,
            sampler: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adapt: AdaptConfig,
    pub seeds: Seeds,
    pub positive_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: 1e-4,
            epochs: 20,
            batch_size: 32,
            adapt: "LN,ST".parse().unwrap(),
            seeds: Seeds::default(),
            positive_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub positive_fraction: f64,
    pub seeds: Seeds,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 2e-3,
            batch_size: 32,
            margin: 0.0,
            positive_fraction: 0.5,
            seeds: Seeds::default(),
        }
    }
}

/// Sampled batches per epoch, `⌈identities · samples² / batch⌉`: as many
/// pairs as there are same-identity (source, target) sample combinations.
pub fn steps_per_epoch(dataset: &Dataset, batch_size: usize) -> usize {
    let spi = dataset.samples_per_id();
    (dataset.ids().len() * spi * spi).div_ceil(batch_size)
}

fn step_seed(sampler: u64, step: usize) -> u64 {
    sampler.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_c: f64,
    pub l_sdl: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub wall_time_secs: f64,
    pub partition: PartitionReport,
}

impl TrainLog {
    /// CSV with header `step,l_c,l_sdl,l_total`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.steps {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

/// Trains a fresh backbone on source–source pairs with the cosine
/// contrastive loss. All parameters are trained.
pub fn pretrain_source(config: &BackboneConfig, dataset: &Dataset, opts: &PretrainConfig) -> Result<Model> {
    if dataset.ids().len() < 2 {
        return Err(Error::InvalidConfig("pretraining needs at least 2 identities".into()));
    }
    let dataset = &dataset.cached();
    let mut model = Model::build(config, opts.seeds.init)?;
    model.set_all_trainable(true);
    let mut adam = AdamState::new(&model, opts.lr);
    let steps = opts.epochs * steps_per_epoch(dataset, opts.batch_size);
    for step in 0..steps {
        let batch = syndata::sample_pairs_between(
            dataset,
            (Modality::Source, Modality::Source),
            opts.batch_size,
            opts.positive_fraction,
            step_seed(opts.seeds.sampler, step),
        )?;
        let mut obj = losses::pair_contrastive_objective(&model, &batch, opts.margin)?;
        check_finite(step, obj.value())?;
        obj.graph.backward(obj.loss)?;
        adam.apply(&mut model, &obj)?;
    }
    Ok(model)
}

/// Embeddings of every source image under the frozen teacher. The
/// backbone has no cross-sample coupling, so these rows equal the ones a
/// per-batch teacher pass would produce.
struct TeacherTable {
    dim: usize,
    rows: HashMap<SampleRef, usize>,
    data: Vec<f64>,
}

impl TeacherTable {
    fn new(teacher: &Model, dataset: &Dataset) -> Result<Self> {
        let refs: Vec<SampleRef> = dataset
            .entries()
            .into_iter()
            .filter(|r| r.modality == Modality::Source)
            .collect();
        let emb = embed_refs(teacher, dataset, &refs)?;
        Ok(Self {
            dim: emb.dim,
            rows: refs.into_iter().enumerate().map(|(i, r)| (r, i)).collect(),
            data: emb.data,
        })
    }

    fn rows(&self, refs: &[SampleRef]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(refs.len() * self.dim);
        for r in refs {
            let i = self.rows[r];
            out.extend_from_slice(&self.data[i * self.dim..(i + 1) * self.dim]);
        }
        Tensor::new(vec![refs.len(), self.dim], out)
    }
}

/// Adapts a copy of `pretrained` to the target modality.
///
/// The teacher is an untouched copy of `pretrained`; the student starts
/// from the same weights with only `config.adapt` groups trainable, and
/// minimizes the λ-weighted contrastive + self-distillation objective.
pub fn adapt(pretrained: &Model, dataset: &Dataset, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    LossWeights::new(config.weights.lambda, config.weights.margin)?;
    let started = Instant::now();
    let dataset = &dataset.cached();
    let teacher = TeacherTable::new(pretrained, dataset)?;
    let mut student = pretrained.clone();
    let report = partition::partition(&mut student, &config.adapt);
    let mut adam = AdamState::new(&student, config.lr);
    let steps = config.epochs * steps_per_epoch(dataset, config.batch_size);
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = syndata::sample_pairs(
            dataset,
            config.batch_size,
            config.positive_fraction,
            step_seed(config.seeds.sampler, step),
        )?;
        let teacher_emb = teacher.rows(&batch.source_refs)?;
        let mut obj = losses::batch_objective_with_teacher(&student, teacher_emb, &batch, &config.weights)?;
        let l_total = obj.value();
        check_finite(step, l_total)?;
        records.push(StepRecord {
            step,
            l_c: obj.l_c,
            l_sdl: obj.l_sdl,
            l_total,
        });
        if report.trainable_names.is_empty() {
            continue;
        }
        obj.graph.backward(obj.loss)?;
        adam.apply(&mut student, &obj)?;
    }
    let check = partition::verify_frozen(pretrained, &student, &config.adapt)?;
    debug_assert!(check.is_intact(), "frozen parameters moved: {:?}", check.modified);
    Ok((
        student,
        TrainLog {
            steps: records,
            wall_time_secs: started.elapsed().as_secs_f64(),
            partition: report,
        },
    ))
}

/// Which modality the probes come from; the gallery is always source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Source gallery against target probes.
    Cross,
    /// Source gallery against other source captures.
    Source,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Protocol::Cross),
            "source" => Ok(Protocol::Source),
            other => Err(Error::InvalidConfig(format!("unknown protocol {other:?} (cross|source)"))),
        }
    }
}

const EMBED_CHUNK: usize = 64;

/// Embeds the referenced images in fixed-size chunks.
pub fn embed_refs(model: &Model, dataset: &Dataset, refs: &[SampleRef]) -> Result<LabeledEmbeddings> {
    let dim = model.config().embed_dim;
    let mut data = Vec::with_capacity(refs.len() * dim);
    for chunk in refs.chunks(EMBED_CHUNK) {
        data.extend_from_slice(model.embed(&dataset.batch(chunk))?.data());
    }
    LabeledEmbeddings::new(data, dim, refs.iter().map(|r| r.id).collect())
}

/// Gallery: source sample 0 of every identity. Probes: every target sample
/// (cross) or source samples 1.. (source).
pub fn protocol_refs(dataset: &Dataset, protocol: Protocol) -> Result<(Vec<SampleRef>, Vec<SampleRef>)> {
    let spi = dataset.samples_per_id() as u32;
    if protocol == Protocol::Source && spi < 2 {
        return Err(Error::InvalidConfig("source protocol needs at least 2 samples per identity".into()));
    }
    let gallery = dataset
        .ids()
        .iter()
        .map(|&id| SampleRef { id, modality: Modality::Source, sample: 0 })
        .collect();
    let probes = dataset
        .ids()
        .iter()
        .flat_map(|&id| match protocol {
            Protocol::Cross => (0..spi)
                .map(|sample| SampleRef { id, modality: Modality::Target, sample })
                .collect::<Vec<_>>(),
            Protocol::Source => (1..spi)
                .map(|sample| SampleRef { id, modality: Modality::Source, sample })
                .collect(),
        })
        .collect();
    Ok((gallery, probes))
}

pub fn evaluate(model: &Model, dataset: &Dataset, protocol: Protocol, far_targets: &[f64]) -> Result<EvalReport> {
    let (gallery, probes) = protocol_refs(dataset, protocol)?;
    let g = embed_refs(model, dataset, &gallery)?;
    let p = embed_refs(model, dataset, &probes)?;
    EvalReport::compute(&g, &p, far_targets)
}

/// Source–source EER of both models on the same held-out identities.
pub fn retention_eval(pretrained: &Model, adapted: &Model, dataset: &Dataset) -> Result<(f64, f64)> {
    let far = metrics::FAR_TARGETS;
    Ok((
        evaluate(pretrained, dataset, Protocol::Source, &far)?.eer,
        evaluate(adapted, dataset, Protocol::Source, &far)?.eer,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miniedge::{BackboneConfig, ParameterGroup};

    fn tiny() -> Model {
        let cfg = BackboneConfig {
            stage_channels: [4, 4, 4],
            stage_depths: [1, 1, 1],
            embed_dim: 4,
            ..BackboneConfig::default()
        };
        Model::build(&cfg, 1).unwrap()
    }

    #[test]
    fn adam_first_step_matches_hand_value() {
        let mut m = tiny();
        let idx = 0;
        m.set_all_trainable(false);
        m.params_mut()[idx].trainable = true;
        m.params_mut()[idx].tensor = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut adam = AdamState::new(&m, 0.1);
        let one = [1.0];
        let mut grads: Vec<Option<&[f64]>> = vec![None; m.params().len()];
        grads[idx] = Some(&one);
        adam.step(&mut m, &grads).unwrap();
        assert_eq!(adam.t, 1);
        let w = m.params()[idx].tensor.data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{w}");
    }

    #[test]
    fn adam_zero_gradient_is_exact_noop() {
        let mut m = tiny();
        let before = m.clone();
        let mut adam = AdamState::new(&m, 1e-3);
        let zeros: Vec<Vec<f64>> = m.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        let grads: Vec<Option<&[f64]>> = zeros.iter().map(|z| Some(z.as_slice())).collect();
        for _ in 0..3 {
            adam.step(&mut m, &grads).unwrap();
        }
        assert_eq!(m, before);
        let (mm, vv) = adam.moments(0).unwrap();
        assert!(mm.iter().chain(vv).all(|&x| x == 0.0));
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut m = tiny();
        let mut adam = AdamState::new(&m, 1e-3);
        let bad: Vec<Vec<f64>> = m.params().iter().map(|p| vec![f64::NAN; p.tensor.numel()]).collect();
        let grads: Vec<Option<&[f64]>> = bad.iter().map(|z| Some(z.as_slice())).collect();
        assert!(matches!(adam.step(&mut m, &grads), Err(Error::NonFiniteGradient(_))));
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn adam_is_pure() {
        let m0 = tiny();
        let g: Vec<Vec<f64>> = m0
            .params()
            .iter()
            .map(|p| (0..p.tensor.numel()).map(|i| (i as f64 * 0.37).sin()).collect())
            .collect();
        let grads: Vec<Option<&[f64]>> = g.iter().map(|z| Some(z.as_slice())).collect();
        let (mut a, mut b) = (m0.clone(), m0.clone());
        let (mut sa, mut sb) = (AdamState::new(&a, 1e-2), AdamState::new(&b, 1e-2));
        sa.step(&mut a, &grads).unwrap();
        sb.step(&mut b, &grads).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn adapt_baseline_and_unit_lambda_are_noops() {
        let m = tiny();
        let ds = syndata::make_dataset(6, 2, 3).unwrap();
        for (layers, lambda) in [("", 0.3), ("LN,ST,S0", 1.0)] {
            let cfg = TrainConfig {
                weights: LossWeights::new(lambda, 0.0).unwrap(),
                epochs: 1,
                batch_size: 4,
                adapt: layers.parse().unwrap(),
                ..TrainConfig::default()
            };
            let (out, log) = adapt(&m, &ds, &cfg).unwrap();
            let a: Vec<Vec<f64>> = m.params().iter().map(|p| p.tensor.data().to_vec()).collect();
            let b: Vec<Vec<f64>> = out.params().iter().map(|p| p.tensor.data().to_vec()).collect();
            assert_eq!(a, b, "layers {layers:?} lambda {lambda}");
            assert_eq!(log.steps.len(), steps_per_epoch(&ds, 4));
            if lambda == 1.0 {
                assert!(log.steps.iter().all(|r| r.l_sdl == 0.0));
            }
        }
    }

    #[test]
    fn adapt_moves_only_selected_groups() {
        let m = tiny();
        let ds = syndata::make_dataset(6, 2, 3).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 1,
            batch_size: 4,
            adapt: "LN".parse().unwrap(),
            ..TrainConfig::default()
        };
        let (out, log) = adapt(&m, &ds, &cfg).unwrap();
        assert!(partition::verify_frozen(&m, &out, &cfg.adapt).unwrap().is_intact());
        let moved = m
            .params()
            .iter()
            .zip(out.params())
            .any(|(a, b)| a.group == ParameterGroup::Ln && a.tensor != b.tensor);
        assert!(moved);
        for r in &log.steps {
            let want = losses::total_loss(r.l_c, r.l_sdl, 0.75).unwrap();
            assert!((r.l_total - want).abs() <= 1e-12);
        }
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("step,l_c,l_sdl,l_total\n"));
    }

    #[test]
    fn teacher_table_matches_in_batch_teacher_pass() {
        let m = Model::build(&BackboneConfig::default(), 3).unwrap();
        let ds = syndata::make_dataset(5, 3, 8).unwrap();
        let table = TeacherTable::new(&m, &ds).unwrap();
        let batch = syndata::sample_pairs(&ds, 6, 0.5, 2).unwrap();
        assert_eq!(table.rows(&batch.source_refs).unwrap(), m.embed(&batch.x_source).unwrap());
        let w = LossWeights::default();
        let a = losses::batch_objective(&m, &m, &batch, &w).unwrap();
        let b = losses::batch_objective_with_teacher(&m, table.rows(&batch.source_refs).unwrap(), &batch, &w).unwrap();
        assert_eq!(a.value().to_bits(), b.value().to_bits());
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("cross".parse::<Protocol>().unwrap(), Protocol::Cross);
        assert!("both".parse::<Protocol>().is_err());
    }
}
