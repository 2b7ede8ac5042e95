//! Pretrain on the source modality, adapt LayerNorm and stem to the target
//! modality, and compare before/after on both protocols.
//! `cargo run --release --example pretrain_and_adapt [-- --full]`
mod common;

use hfr_adapt::cli::pipeline::Workspace;
use hfr_adapt::partition;
use hfr_adapt::trainer::Protocol;

fn main() -> hfr_adapt::Result<()> {
    let ws = Workspace::new(common::config())?;
    let pretrained = ws.pretrain()?;
    let (source, cross) = ws.gap(&pretrained)?;
    println!("pretrained: source EER {source:.4}, cross EER {cross:.4}");

    let train = ws.config.train_config()?;
    let (adapted, log) = ws.adapt(&pretrained, 0, &train)?;
    let last = log.steps.last().expect("at least one step");
    println!(
        "adapted {} with λ={} for {} steps: L_C {:.4}, L_SDL {:.5}",
        train.adapt, train.weights.lambda, log.steps.len(), last.l_c, last.l_sdl
    );
    println!("{} LN + {} other scalars trained, {} frozen", log.partition.n_ln_params, log.partition.n_adapted_params, log.partition.n_frozen_params);
    assert!(partition::verify_frozen(&pretrained, &adapted, &train.adapt)?.is_intact());

    for (name, model) in [("pretrained", &pretrained), ("adapted", &adapted)] {
        let c = ws.evaluate(model, Protocol::Cross, Some(0))?;
        let s = ws.evaluate(model, Protocol::Source, Some(0))?;
        println!("{name:<10} fold 0: cross EER {:.4} AUC {:.4} Rank-1 {:.3} | source EER {:.4}", c.mean.eer, c.mean.auc, c.mean.rank1, s.mean.eer);
    }
    Ok(())
}
