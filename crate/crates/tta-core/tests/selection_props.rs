//! Property tests for the selection module plus a brute-force scoring
//! oracle: an independent per-sample recomputation of the scores from
//! first principles that the streaming implementation must match.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::selection::{
    combined_score_eata, combined_score_eatac, update_moving_average, SelectionConfig,
    SelectionState,
};
use tta_core::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;

/// Independent scalar re-derivation of both scores for one sample.
mod oracle {
    use super::PROB_FLOOR;

    pub fn entropy(p: &[f64]) -> f64 {
        let mut e = 0.0;
        for &v in p {
            e -= v * v.max(PROB_FLOOR).ln();
        }
        e
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    pub fn score_weighted(p: &[f64], tracker: Option<&[f64]>, e0: f64, eps: f64) -> f64 {
        let e = entropy(p);
        let s_ent = if e < e0 { (e0 - e).exp() } else { 0.0 };
        let s_div = match tracker {
            None => 1.0,
            Some(m) => {
                if cosine(p, m) < eps {
                    1.0
                } else {
                    0.0
                }
            }
        };
        s_ent * s_div
    }

    pub fn score_binary(p: &[f64], tracker: Option<&[f64]>, e0: f64, eps: f64) -> f64 {
        let reliable = entropy(p) < e0;
        let diverse = match tracker {
            None => true,
            Some(m) => cosine(p, m) < eps,
        };
        if reliable && diverse {
            1.0
        } else {
            0.0
        }
    }
}

fn random_prob_row(rng: &mut ChaCha8Rng, c: usize, sharpness: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..c)
        .map(|_| (rng.gen::<f64>() * sharpness).exp())
        .collect();
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v /= sum;
    }
    row
}

/// Streaming scores equal the per-sample brute-force oracle exactly, over
/// many batches with a live tracker.
#[test]
fn streaming_scores_match_brute_force_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let c = 10;
    let cfg = SelectionConfig {
        epsilon: 0.5,
        ..SelectionConfig::for_classes(c)
    };
    let mut state_w = SelectionState::new();
    let mut state_b = SelectionState::new();
    for _batch in 0..100 {
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|_| {
                let sharp = rng.gen_range(1.0..14.0);
                random_prob_row(&mut rng, c, sharp)
            })
            .collect();

        let tracker_w = state_w.tracker().map(|t| t.data().to_vec());
        let mut selected_w = Vec::new();
        for row in &rows {
            let streaming = combined_score_eata(row, &state_w, &cfg).unwrap();
            let brute = oracle::score_weighted(row, tracker_w.as_deref(), cfg.e0, cfg.epsilon);
            assert_eq!(streaming, brute, "weighted score mismatch");
            if streaming > 0.0 {
                selected_w.push(row.clone());
            }
        }
        if !selected_w.is_empty() {
            update_moving_average(&mut state_w, &Tensor::from_rows(&selected_w).unwrap(), &cfg)
                .unwrap();
        }

        let tracker_b = state_b.tracker().map(|t| t.data().to_vec());
        let mut selected_b = Vec::new();
        for row in &rows {
            let streaming = combined_score_eatac(row, &state_b, &cfg).unwrap();
            let brute = oracle::score_binary(row, tracker_b.as_deref(), cfg.e0, cfg.epsilon);
            assert_eq!(streaming, brute, "binary score mismatch");
            if streaming > 0.0 {
                selected_b.push(row.clone());
            }
        }
        if !selected_b.is_empty() {
            update_moving_average(&mut state_b, &Tensor::from_rows(&selected_b).unwrap(), &cfg)
                .unwrap();
        }
    }
    assert!(state_w.updates() > 0 && state_b.updates() > 0);
}

proptest! {
    /// Raising E0 never shrinks, and shrinking epsilon never grows, the
    /// selected set on a frozen batch.
    #[test]
    fn selection_is_monotone_in_thresholds(seed in 0u64..500, e0_lo in 0.2f64..1.0, e0_gap in 0.01f64..1.0,
                                           eps_lo in 0.01f64..0.8, eps_gap in 0.001f64..0.19) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 8;
        let rows: Vec<Vec<f64>> = (0..32).map(|_| {
            let sharp = rng.gen_range(0.5..12.0);
            random_prob_row(&mut rng, c, sharp)
        }).collect();
        let mut state = SelectionState::new();
        update_moving_average(&mut state, &Tensor::from_rows(&rows[..4].to_vec()).unwrap(),
                              &SelectionConfig::for_classes(c)).unwrap();

        let count = |e0: f64, eps: f64| -> usize {
            let cfg = SelectionConfig { e0, epsilon: eps, alpha_ma: 0.1 };
            rows.iter()
                .filter(|r| combined_score_eata(r, &state, &cfg).unwrap() > 0.0)
                .count()
        };
        let eps_hi = eps_lo + eps_gap;
        let e0_hi = e0_lo + e0_gap;
        prop_assert!(count(e0_lo, eps_lo) <= count(e0_hi, eps_lo));
        prop_assert!(count(e0_lo, eps_lo) <= count(e0_lo, eps_hi));
    }

    /// The weighted score is the exact product of its two factors, so it is
    /// scale-equivariant in the entropy weight and zero-absorbing in the
    /// diversity filter.
    #[test]
    fn weighted_score_is_exact_product(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 6;
        let cfg = SelectionConfig::for_classes(c);
        let sharp = rng.gen_range(0.5..12.0);
        let row = random_prob_row(&mut rng, c, sharp);
        let mut state = SelectionState::new();
        if seed % 2 == 0 {
            let anchor = random_prob_row(&mut rng, c, 3.0);
            update_moving_average(&mut state, &Tensor::from_rows(&[anchor]).unwrap(), &cfg).unwrap();
        }
        let s_ent = tta_core::selection::entropy_weight(&row, &cfg);
        let s_div = tta_core::selection::diversity_weight(&row, &state, &cfg).unwrap();
        let combined = combined_score_eata(&row, &state, &cfg).unwrap();
        prop_assert_eq!(combined, s_ent * s_div);
        if s_div == 0.0 {
            prop_assert_eq!(combined, 0.0);
        }
    }

    /// The tracker stays a probability vector under any update sequence.
    #[test]
    fn tracker_remains_probability_vector(seed in 0u64..300, batches in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 7;
        let cfg = SelectionConfig::for_classes(c);
        let mut state = SelectionState::new();
        for _ in 0..batches {
            let n = rng.gen_range(1..6);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| {
                let sharp = rng.gen_range(0.5..10.0);
                random_prob_row(&mut rng, c, sharp)
            }).collect();
            update_moving_average(&mut state, &Tensor::from_rows(&rows).unwrap(), &cfg).unwrap();
            let m = state.tracker().unwrap();
            let sum: f64 = m.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "tracker sum {}", sum);
            prop_assert!(m.data().iter().all(|&v| v >= 0.0));
        }
    }

    /// KL divergence is non-negative for random probability pairs.
    #[test]
    fn kl_is_nonnegative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(2..12);
        let sharp_p = rng.gen_range(0.5..14.0);
        let p = random_prob_row(&mut rng, c, sharp_p);
        let sharp_q = rng.gen_range(0.5..14.0);
        let q = random_prob_row(&mut rng, c, sharp_q);
        let kl = tta_core::tensor::kl_of_probs(&p, &q);
        prop_assert!(kl >= -1e-12, "kl = {}", kl);
    }

    /// Entropy of any softmax output stays within [0, ln C].
    #[test]
    fn entropy_bounds_hold(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(2..12);
        let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-40.0..40.0)).collect();
        let t = Tensor::new(vec![c], logits).unwrap();
        let p = tta_core::softmax_rows(&t);
        let e = tta_core::tensor::entropy_of_probs(p.data());
        prop_assert!(e >= 0.0);
        prop_assert!(e <= (c as f64).ln() + 1e-12);
    }
}
