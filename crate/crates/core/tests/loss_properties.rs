use hfr_adapt::losses::{contrastive_loss, cosine, self_distillation_loss, total_loss};
use proptest::prelude::*;

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 8).prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
}

#[test]
fn listed_examples_hold_exactly() {
    assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(cosine(&[1.0, 0.0], &[0.6, 0.8]).unwrap(), 0.6);
    let (a, b) = ([1.0, 0.0], [0.6, 0.8]);
    assert_eq!(contrastive_loss(&a, &a, 1, 0.0).unwrap(), 0.0);
    assert_eq!(contrastive_loss(&a, &b, 0, 0.0).unwrap(), 0.6);
    assert_eq!(contrastive_loss(&a, &[-0.2, 0.979_795_897_113_271_2], 0, 0.0).unwrap(), 0.0);
    assert_eq!(contrastive_loss(&a, &b, 1, 0.0).unwrap(), 1.0 - 0.6);
    assert_eq!(self_distillation_loss(&b, &b).unwrap(), 0.0);
    assert_eq!(self_distillation_loss(&a, &[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(self_distillation_loss(&a, &[-1.0, 0.0]).unwrap(), 2.0);
    assert!((total_loss(0.4, 0.2, 0.75).unwrap() - 0.25).abs() <= 1e-15);
    assert_eq!(total_loss(0.4, 0.2, 0.0).unwrap(), 0.4);
    assert_eq!(total_loss(0.4, 0.2, 1.0).unwrap(), 0.2);
    assert!(contrastive_loss(&a, &b, 2, 0.0).is_err());
    assert!(cosine(&a, &[0.0, 0.0]).is_err());
    assert!(total_loss(0.4, 0.2, 1.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn contrastive_is_scale_invariant(a in vec_strategy(), b in vec_strategy(), alpha in 1e-3f64..1e3, beta in 1e-3f64..1e3, m in 0.0f64..1.0) {
        let sa: Vec<f64> = a.iter().map(|x| x * alpha).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * beta).collect();
        for y in [0u8, 1] {
            let base = contrastive_loss(&a, &b, y, m).unwrap();
            prop_assert!((contrastive_loss(&sa, &sb, y, m).unwrap() - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn losses_are_symmetric_and_bounded(a in vec_strategy(), b in vec_strategy(), m in 0.0f64..1.0) {
        for y in [0u8, 1] {
            prop_assert_eq!(contrastive_loss(&a, &b, y, m).unwrap(), contrastive_loss(&b, &a, y, m).unwrap());
        }
        let pos = contrastive_loss(&a, &b, 1, m).unwrap();
        let neg = contrastive_loss(&a, &b, 0, m).unwrap();
        prop_assert!((0.0..=2.0).contains(&pos));
        prop_assert!(neg >= 0.0 && neg <= 1.0 - m + 1e-15);
        let sdl = self_distillation_loss(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&sdl));
        prop_assert_eq!(sdl, self_distillation_loss(&b, &a).unwrap());
    }

    #[test]
    fn total_loss_is_linear(lc in 0.0f64..2.0, ls in 0.0f64..2.0, d in 0.0f64..1.0, lambda in 0.0f64..=1.0) {
        let t = total_loss(lc, ls, lambda).unwrap();
        prop_assert!((t - ((1.0 - lambda) * lc + lambda * ls)).abs() <= 1e-15);
        prop_assert!(total_loss(lc + d, ls, lambda).unwrap() >= t);
        prop_assert!(total_loss(lc, ls + d, lambda).unwrap() >= t);
    }
}
