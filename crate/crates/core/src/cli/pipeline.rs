//! The end-to-end workflow shared by the subcommands.
//!
//! Identities `0..data.n_ids` are split into folds for adaptation and
//! evaluation. Pretraining draws from a disjoint identity range that
//! follows them. Models leave every stage rounded to f32, so a model held
//! in memory behaves exactly like the same model reloaded from disk.

use crate::cli::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, FoldSummary};
use crate::miniedge::{BackboneConfig, Model};
use crate::syndata::{self, Dataset, Fold, ProtocolSplit};
use crate::trainer::{self, Protocol, TrainConfig, TrainLog};

pub struct Workspace {
    pub config: RunConfig,
    pub backbone: BackboneConfig,
    pub split: ProtocolSplit,
    data: Dataset,
    pretrain_pool: Dataset,
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.data;
        let all = syndata::make_dataset(d.n_ids + config.pretrain.n_ids, d.samples_per_id, d.dataset_seed)?;
        let data = all.with_id_range(0, d.n_ids);
        let pretrain_pool = all.with_id_range(d.n_ids as u32, config.pretrain.n_ids);
        let split = syndata::make_folds(d.n_ids, config.eval.n_folds, config.train.seeds.data)?;
        Ok(Self {
            backbone: config.backbone()?,
            config,
            split,
            data,
            pretrain_pool,
        })
    }

    pub fn fold(&self, k: usize) -> Result<&Fold> {
        self.split.folds.get(k).ok_or_else(|| {
            Error::InvalidConfig(format!("fold {k} does not exist ({} folds)", self.split.folds.len()))
        })
    }

    pub fn train_set(&self, k: usize) -> Result<Dataset> {
        Ok(self.data.subset(self.fold(k)?.train_ids.iter().copied()))
    }

    pub fn eval_set(&self, k: usize) -> Result<Dataset> {
        Ok(self.data.subset(self.fold(k)?.eval_ids.iter().copied()))
    }

    /// Every adaptation/evaluation identity; disjoint from the pretraining pool.
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn pretrain_pool(&self) -> &Dataset {
        &self.pretrain_pool
    }

    pub fn pretrain(&self) -> Result<Model> {
        let mut model = trainer::pretrain_source(&self.backbone, &self.pretrain_pool, &self.config.pretrain_config())?;
        model.round_to_f32();
        Ok(model)
    }

    pub fn adapt(&self, pretrained: &Model, fold: usize, train: &TrainConfig) -> Result<(Model, TrainLog)> {
        let (mut model, log) = trainer::adapt(pretrained, &self.train_set(fold)?, train)?;
        model.round_to_f32();
        Ok((model, log))
    }

    /// Fold `k`'s held-out identities, or every fold when `fold` is `None`.
    pub fn evaluate(&self, model: &Model, protocol: Protocol, fold: Option<usize>) -> Result<FoldSummary> {
        let folds: Vec<usize> = match fold {
            Some(k) => vec![k],
            None => (0..self.split.folds.len()).collect(),
        };
        let reports = folds
            .into_iter()
            .map(|k| trainer::evaluate(model, &self.eval_set(k)?, protocol, &self.config.eval.far_targets))
            .collect::<Result<Vec<_>>>()?;
        metrics::aggregate_folds(&reports)
    }

    /// (source, cross) EER over all adaptation/evaluation identities.
    pub fn gap(&self, model: &Model) -> Result<(f64, f64)> {
        let far = &self.config.eval.far_targets;
        Ok((
            trainer::evaluate(model, &self.data, Protocol::Source, far)?.eer,
            trainer::evaluate(model, &self.data, Protocol::Cross, far)?.eer,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_ranges_are_disjoint() {
        let ws = Workspace::new(RunConfig::default()).unwrap();
        let pool: Vec<u32> = ws.pretrain_pool().ids().to_vec();
        assert!(ws.data().ids().iter().all(|i| !pool.contains(i)));
        assert_eq!(pool.len(), ws.config.pretrain.n_ids);
        for k in 0..ws.split.folds.len() {
            let (t, e) = (ws.train_set(k).unwrap(), ws.eval_set(k).unwrap());
            assert!(t.ids().iter().all(|i| !e.ids().contains(i)));
            assert_eq!(t.ids().len() + e.ids().len(), ws.config.data.n_ids);
        }
        assert!(ws.fold(ws.split.folds.len()).is_err());
    }
}
