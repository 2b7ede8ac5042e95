//! Cross-modal EER and source retention across λ, from one pretrained model.
mod common;

use hfr_adapt::cli::pipeline::Workspace;
use hfr_adapt::trainer::{Protocol, TrainConfig};
use hfr_adapt::LossWeights;

fn main() -> hfr_adapt::Result<()> {
    let ws = Workspace::new(common::config())?;
    let pretrained = ws.pretrain()?;
    let source_before = ws.evaluate(&pretrained, Protocol::Source, Some(0))?.mean.eer;
    let base = ws.config.train_config()?;
    println!("{:>5} {:>10} {:>16}", "λ", "cross EER", "source EER drift");
    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let train = TrainConfig { weights: LossWeights::new(lambda, 0.0)?, ..base.clone() };
        let (model, _) = ws.adapt(&pretrained, 0, &train)?;
        let cross = ws.evaluate(&model, Protocol::Cross, Some(0))?.mean.eer;
        let source = ws.evaluate(&model, Protocol::Source, Some(0))?.mean.eer;
        println!("{lambda:>5.2} {cross:>10.4} {:>+16.4}", source - source_before);
    }
    Ok(())
}
