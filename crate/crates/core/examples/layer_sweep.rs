//! Cross-modal EER for each adapted layer set, from one pretrained model.
mod common;

use hfr_adapt::cli::pipeline::Workspace;
use hfr_adapt::partition::AdaptConfig;
use hfr_adapt::trainer::{Protocol, TrainConfig};

fn main() -> hfr_adapt::Result<()> {
    let ws = Workspace::new(common::config())?;
    let pretrained = ws.pretrain()?;
    let base = ws.config.train_config()?;
    println!("{:<16} {:>7} {:>7} {:>7}", "layers", "EER", "AUC", "Rank-1");
    for adapt in AdaptConfig::presets() {
        let train = TrainConfig { adapt: adapt.clone(), ..base.clone() };
        let (model, _) = ws.adapt(&pretrained, 0, &train)?;
        let s = ws.evaluate(&model, Protocol::Cross, Some(0))?;
        println!("{:<16} {:>7.4} {:>7.4} {:>7.3}", adapt.to_string(), s.mean.eer, s.mean.auc, s.mean.rank1);
    }
    Ok(())
}
