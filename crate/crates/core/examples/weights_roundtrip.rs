//! Saving and loading `XEFW` weight files.
use hfr_adapt::cli::weights;
use hfr_adapt::{BackboneConfig, Model};

fn main() -> hfr_adapt::Result<()> {
    let cfg = BackboneConfig::default();
    let mut model = Model::build(&cfg, 3)?;
    model.round_to_f32();
    let path = std::env::temp_dir().join("hfr_roundtrip.xefw");
    weights::save(&model, &path)?;
    let back = weights::load(&cfg, &path)?;
    let bytes = std::fs::read(&path)?;
    println!("{} tensors, {} bytes, magic {:?}", back.params().len(), bytes.len(), std::str::from_utf8(&bytes[..4]).unwrap());
    println!("reloaded model identical: {}", back == model);
    let first = &weights::decode(&bytes)?[0];
    println!("first record: {} [{}] {:?}", first.name, first.group, first.shape);
    Ok(())
}
