//! The contrastive and self-distillation losses on hand-picked embeddings.
use hfr_adapt::losses::{contrastive_loss, self_distillation_loss, total_loss};

fn main() -> hfr_adapt::Result<()> {
    let a = [1.0, 0.0];
    let b = [0.0, 1.0];
    let c = [1.0, 1.0];
    println!("genuine, orthogonal:   L_C = {}", contrastive_loss(&a, &b, 1, 0.0)?);
    println!("impostor, orthogonal:  L_C = {}", contrastive_loss(&a, &b, 0, 0.0)?);
    println!("impostor, 45 degrees:  L_C = {:.6}", contrastive_loss(&a, &c, 0, 0.0)?);
    println!("impostor, margin 0.8:  L_C = {}", contrastive_loss(&a, &c, 0, 0.8)?);
    println!("teacher = student:     L_SDL = {}", self_distillation_loss(&c, &c)?);
    println!("teacher ⟂ student:     L_SDL = {}", self_distillation_loss(&a, &b)?);
    println!("total(0.4, 0.2, 0.75) = {}", total_loss(0.4, 0.2, 0.75)?);
    Ok(())
}
