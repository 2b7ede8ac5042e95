//! Parameter and multiply-accumulate accounting per group, and how it
//! scales with width.
use hfr_adapt::{BackboneConfig, Model};

fn main() -> hfr_adapt::Result<()> {
    let model = Model::build(&BackboneConfig::default(), 0)?;
    let count = model.count_parameters();
    println!("default backbone: {} parameters, {} MACs/sample, {} LayerNorm layers",
        count.total, model.estimate_flops(), model.ln_layer_count());
    for (group, n) in &count.per_group {
        println!("  {group:<4} {n:>6}");
    }
    for channels in [[4, 8, 16], [8, 16, 32], [16, 32, 64]] {
        let cfg = BackboneConfig { stage_channels: channels, ..BackboneConfig::default() };
        let m = Model::build(&cfg, 0)?;
        println!("channels {channels:?}: {:>7} params {:>8} MACs", m.count_parameters().total, m.estimate_flops());
    }
    Ok(())
}
