//! Verification and identification metrics on a toy score set and on
//! labelled embeddings, plus fold aggregation.
use hfr_adapt::metrics::{self, LabeledEmbeddings, ScoreSet};

fn main() -> hfr_adapt::Result<()> {
    let scores = ScoreSet::new(vec![0.9, 0.8, 0.7, 0.3], vec![0.6, 0.4, 0.2, 0.1, 0.75]);
    println!("AUC {:.4}  EER {:.4}", metrics::auc(&scores)?, metrics::eer(&scores)?);
    let vr = metrics::vr_at_far(&scores, 0.2)?;
    println!("VR@FAR=0.2: {:.3} (threshold {}, realized FAR {})", vr.vr, vr.threshold, vr.realized_far);

    let gallery = LabeledEmbeddings::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1])?;
    let probes = LabeledEmbeddings::new(vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.6], 2, vec![0, 1, 1])?;
    let fold_a = metrics::EvalReport::compute(&gallery, &probes, &metrics::FAR_TARGETS)?;
    println!("{}", serde_json::to_string(&fold_a)?);

    let mut fold_b = fold_a.clone();
    fold_b.eer += 0.2;
    let summary = metrics::aggregate_folds(&[fold_a, fold_b])?;
    println!("EER mean {:.4} std {:.4} over {} folds", summary.mean.eer, summary.std.eer, summary.n_folds);
    Ok(())
}
