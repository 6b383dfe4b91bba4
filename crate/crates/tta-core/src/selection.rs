//! Active sample selection: entropy-based reliability weighting, a
//! diversity filter against an exponential moving average of past selected
//! predictions, and the combined per-sample scores for the weighted and
//! binary selection variants.

use crate::error::{Result, TtaError};
use crate::tensor::{check_probability_rows, cosine_similarity, entropy_of_probs, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Entropy threshold; samples with prediction entropy at or above it
    /// are excluded (strict `<` indicator).
    pub e0: f64,
    /// Cosine-similarity threshold against the tracker; samples at or
    /// above it are considered redundant.
    pub epsilon: f64,
    /// Moving-average factor for the tracker update.
    pub alpha_ma: f64,
}

impl SelectionConfig {
    /// Defaults for a `c`-class head: threshold at 0.4·ln C.
    pub fn for_classes(c: usize) -> Self {
        SelectionConfig {
            e0: 0.4 * (c as f64).ln(),
            epsilon: 0.05,
            alpha_ma: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e0 > 0.0) {
            return Err(TtaError::invalid(format!("e0 must be > 0, got {}", self.e0)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(TtaError::invalid(format!(
                "epsilon must be in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_ma) {
            return Err(TtaError::invalid(format!(
                "alpha_ma must be in [0, 1], got {}",
                self.alpha_ma
            )));
        }
        Ok(())
    }
}

/// Moving-average prediction tracker; empty until the first update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionState {
    m: Option<Tensor>,
    t: u64,
}

impl SelectionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracker(&self) -> Option<&Tensor> {
        self.m.as_ref()
    }

    pub fn updates(&self) -> u64 {
        self.t
    }
}

/// exp(E0 − E) when the prediction entropy is strictly below E0, else 0.
pub fn entropy_weight(probs: &[f64], cfg: &SelectionConfig) -> f64 {
    let e = entropy_of_probs(probs);
    if e < cfg.e0 {
        (cfg.e0 - e).exp()
    } else {
        0.0
    }
}

/// 1 when no tracker exists yet or the prediction's cosine similarity with
/// the tracker is strictly below epsilon, else 0.
pub fn diversity_weight(
    probs: &[f64],
    state: &SelectionState,
    cfg: &SelectionConfig,
) -> Result<f64> {
    let Some(m) = &state.m else { return Ok(1.0) };
    let cos = cosine_similarity(probs, m.data())?;
    Ok(if cos < cfg.epsilon { 1.0 } else { 0.0 })
}

/// Weighted score: product of the entropy weight and the diversity filter.
pub fn combined_score_eata(
    probs: &[f64],
    state: &SelectionState,
    cfg: &SelectionConfig,
) -> Result<f64> {
    Ok(entropy_weight(probs, cfg) * diversity_weight(probs, state, cfg)?)
}

/// Binary score: 1 iff the sample passes both the entropy indicator and
/// the diversity filter, with no exponential reweighting.
pub fn combined_score_eatac(
    probs: &[f64],
    state: &SelectionState,
    cfg: &SelectionConfig,
) -> Result<f64> {
    let reliable = entropy_of_probs(probs) < cfg.e0;
    if !reliable {
        return Ok(0.0);
    }
    diversity_weight(probs, state, cfg)
}

/// Fold the mean prediction of the selected samples into the tracker:
/// first update adopts the batch mean, later updates apply the recursion
/// m ← α·ȳ + (1−α)·m.
pub fn update_moving_average(
    state: &mut SelectionState,
    selected_probs: &Tensor,
    cfg: &SelectionConfig,
) -> Result<()> {
    if selected_probs.rows() == 0 || selected_probs.numel() == 0 {
        return Err(TtaError::EmptyInput {
            what: "update_moving_average: empty selected set",
        });
    }
    check_probability_rows(selected_probs, "update_moving_average")?;
    let (rows, cols) = (selected_probs.rows(), selected_probs.cols());
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for j in 0..cols {
            mean[j] += selected_probs.data()[r * cols + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    match &mut state.m {
        None => state.m = Some(Tensor::new(vec![cols], mean)?),
        Some(t) => {
            if t.numel() != cols {
                return Err(TtaError::LayoutMismatch {
                    what: format!("tracker has {} classes, batch has {cols}", t.numel()),
                });
            }
            let a = cfg.alpha_ma;
            for (mv, y) in t.data_mut().iter_mut().zip(&mean) {
                *mv = a * y + (1.0 - a) * *mv;
            }
        }
    }
    state.t += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SelectionConfig {
        SelectionConfig::for_classes(10)
    }

    #[test]
    fn entropy_weight_boundary_is_strict() {
        let c = cfg();
        // Construct a two-point distribution whose entropy can be compared
        // against a shifted threshold directly.
        let probs = [0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let e = entropy_of_probs(&probs);
        let at = SelectionConfig { e0: e, ..c };
        assert_eq!(entropy_weight(&probs, &at), 0.0);
        let above = SelectionConfig { e0: e + 1.0, ..c };
        assert!((entropy_weight(&probs, &above) - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn entropy_weight_of_onehot() {
        let c = cfg();
        let mut probs = [0.0; 10];
        probs[3] = 1.0;
        // E = 0, so the weight is exp(E0) = exp(0.4 ln 10).
        let expected = (0.4 * 10f64.ln()).exp();
        assert!((entropy_weight(&probs, &c) - expected).abs() < 1e-9);
        assert!((expected - 2.51189).abs() < 1e-5);
    }

    #[test]
    fn diversity_weight_conventions() {
        let c = cfg();
        let state = SelectionState::new();
        let p = [0.2, 0.8];
        // Empty tracker: everything passes.
        assert_eq!(diversity_weight(&p, &state, &c).unwrap(), 1.0);

        let mut state = SelectionState::new();
        update_moving_average(
            &mut state,
            &Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap(),
            &c,
        )
        .unwrap();
        // Identical prediction: cosine 1 >= epsilon, filtered.
        assert_eq!(diversity_weight(&p, &state, &c).unwrap(), 0.0);
        // Disjoint support: cosine 0 < epsilon, kept.
        let mut s2 = SelectionState::new();
        update_moving_average(&mut s2, &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &c).unwrap();
        assert_eq!(diversity_weight(&[0.0, 1.0], &s2, &c).unwrap(), 1.0);
    }

    #[test]
    fn combined_scores_absorb_zero() {
        let c = cfg();
        let mut state = SelectionState::new();
        update_moving_average(&mut state, &Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap(), &c)
            .unwrap();
        // Low entropy but redundant.
        assert_eq!(combined_score_eata(&[0.9, 0.1], &state, &c).unwrap(), 0.0);
        assert_eq!(combined_score_eatac(&[0.9, 0.1], &state, &c).unwrap(), 0.0);
        // High entropy but diverse.
        let uniform = [0.1; 10];
        assert_eq!(combined_score_eata(&uniform, &SelectionState::new(), &c).unwrap(), 0.0);
        assert_eq!(
            combined_score_eatac(&uniform, &SelectionState::new(), &c).unwrap(),
            0.0
        );
    }

    #[test]
    fn eatac_score_is_binary() {
        let c = cfg();
        let state = SelectionState::new();
        let mut confident = [0.0; 10];
        confident[0] = 0.95;
        confident[1] = 0.05;
        let s = combined_score_eatac(&confident, &state, &c).unwrap();
        assert_eq!(s, 1.0);
        let w = combined_score_eata(&confident, &state, &c).unwrap();
        assert!(w > 1.0, "weighted score should exceed 1, got {w}");
    }

    #[test]
    fn moving_average_recursion() {
        let c = SelectionConfig {
            alpha_ma: 0.1,
            ..cfg()
        };
        let mut state = SelectionState::new();
        // First update adopts the batch mean.
        update_moving_average(
            &mut state,
            &Tensor::from_rows(&[vec![0.4, 0.6], vec![0.6, 0.4]]).unwrap(),
            &c,
        )
        .unwrap();
        assert_eq!(state.tracker().unwrap().data(), &[0.5, 0.5]);
        assert_eq!(state.updates(), 1);

        // m = [0.5, 0.5], ȳ = [1, 0], α = 0.1 → [0.55, 0.45].
        update_moving_average(&mut state, &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &c)
            .unwrap();
        let m = state.tracker().unwrap().data();
        assert!((m[0] - 0.55).abs() < 1e-12 && (m[1] - 0.45).abs() < 1e-12);

        // Fixed point: ȳ == m leaves m unchanged.
        let before = state.tracker().unwrap().clone();
        update_moving_average(
            &mut state,
            &Tensor::from_rows(&[vec![0.55, 0.45]]).unwrap(),
            &c,
        )
        .unwrap();
        assert_eq!(state.tracker().unwrap(), &before);
    }

    #[test]
    fn empty_selected_set_is_an_error_and_leaves_state_alone() {
        let c = cfg();
        let mut state = SelectionState::new();
        let empty = Tensor::zeros(vec![0, 10]);
        assert!(update_moving_average(&mut state, &empty, &c).is_err());
        assert_eq!(state.updates(), 0);
        assert!(state.tracker().is_none());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(SelectionConfig { e0: 0.0, ..cfg() }.validate().is_err());
        assert!(SelectionConfig { epsilon: 1.0, ..cfg() }.validate().is_err());
        assert!(SelectionConfig { alpha_ma: 1.1, ..cfg() }.validate().is_err());
    }
}
