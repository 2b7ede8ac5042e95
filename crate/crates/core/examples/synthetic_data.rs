//! The two-modality synthetic dataset: rendering, the pixel-level modality
//! gap, pair sampling, folds and raw export.
use hfr_adapt::syndata::{self, Modality, SampleRef};

fn main() -> hfr_adapt::Result<()> {
    let ds = syndata::make_dataset(20, 4, 42)?;
    println!("{} identities, {} images", ds.ids().len(), ds.len());

    let mut gap = 0.0;
    for &id in ds.ids() {
        let s = ds.image(SampleRef { id, modality: Modality::Source, sample: 0 });
        let t = ds.image(SampleRef { id, modality: Modality::Target, sample: 0 });
        gap += s.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.numel() as f64;
    }
    println!("mean |source - target| per pixel: {:.3}", gap / ds.ids().len() as f64);

    let batch = syndata::sample_pairs(&ds, 8, 0.5, 7)?;
    for i in 0..batch.len() {
        println!("pair {i}: source id {:>2} target id {:>2} y={}", batch.source_refs[i].id, batch.target_refs[i].id, batch.y[i]);
    }

    let split = syndata::make_folds(20, 2, 42)?;
    for (k, f) in split.folds.iter().enumerate() {
        println!("fold {k}: {} train ids, eval ids {:?}", f.train_ids.len(), f.eval_ids);
    }

    let dir = std::env::temp_dir();
    let (blob, manifest) = (dir.join("hfr_images.f32"), dir.join("hfr_images.csv"));
    ds.export(&ds.entries()[..8], &blob, &manifest)?;
    println!("exported 8 images to {} (manifest {})", blob.display(), manifest.display());
    Ok(())
}
