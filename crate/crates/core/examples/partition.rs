//! How each layer-set preset splits the backbone into LayerNorm,
//! adapted and frozen parameters.
use hfr_adapt::partition::{self, AdaptConfig};
use hfr_adapt::{BackboneConfig, Model};

fn main() -> hfr_adapt::Result<()> {
    let base = Model::build(&BackboneConfig::default(), 0)?;
    println!("{:<16} {:>6} {:>8} {:>7}", "preset", "LN", "adapted", "frozen");
    for preset in AdaptConfig::presets() {
        let mut m = base.clone();
        let r = partition::partition(&mut m, &preset);
        println!("{:<16} {:>6} {:>8} {:>7}", preset.to_string(), r.n_ln_params, r.n_adapted_params, r.n_frozen_params);
    }
    Ok(())
}
