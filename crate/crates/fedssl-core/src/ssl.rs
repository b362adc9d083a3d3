//! Confidence-based selection between the global and local model for
//! pseudo-labeling, plus the global-local consistency term.
//!
//! For each unlabeled sample the more confident of the two (frozen) models
//! provides the pseudo-label if its peak probability clears the threshold
//! `beta`; when the discarded model agrees on the label, a KL term pulls the
//! trained model toward the discarded model's distribution, weighted by the
//! confidence ratio scaled by `lambda0`.

use alloc::borrow::Cow;
use alloc::vec::Vec;

use crate::nn::{
    self, BatchItem, ClassLabel, Gradient, LossTerm, ModelParams, NnResult, ProbVector,
};

/// Scalar peakedness measure of a probability vector; higher = more
/// confident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfidenceMetric {
    /// Population variance of the entries around their mean 1/N.
    Variance,
    /// `ln N - H(p)`, shifted so the uniform vector scores 0.
    NegEntropy,
}

impl ConfidenceMetric {
    pub fn score(&self, p: &ProbVector) -> f64 {
        match self {
            ConfidenceMetric::Variance => confidence_variance(p),
            ConfidenceMetric::NegEntropy => confidence_neg_entropy(p),
        }
    }
}

/// `(1/N) * sum_i (p_i - 1/N)^2`; 0 for uniform, maximal for one-hot.
pub fn confidence_variance(p: &ProbVector) -> f64 {
    let n = p.len() as f64;
    let mean = 1.0 / n;
    p.as_slice().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// `ln N - H(p)` with `0 ln 0 = 0`; 0 for uniform, `ln N` for one-hot.
/// Nonnegative so it can serve as a ratio weight.
pub fn confidence_neg_entropy(p: &ProbVector) -> f64 {
    let n = p.len() as f64;
    let entropy: f64 = p
        .as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * libm::log(v))
        .sum();
    (libm::log(n) - entropy).max(0.0)
}

/// Which of the two candidate models produced the selected distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSide {
    Global,
    Local,
}

/// How the pseudo-labeling model is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Pick the more confident model (ties go to Global).
    ConfidenceSelect,
    /// Always the local model (ablation).
    LocalOnly,
    /// Always the global model (ablation).
    GlobalOnly,
}

/// Semi-supervised hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslConfig {
    /// Pseudo-label acceptance threshold in [0, 1]; strict inequality.
    pub beta: f64,
    /// Upper bound of the consistency weight, >= 0.
    pub lambda0: f64,
    pub confidence_metric: ConfidenceMetric,
    pub selection_mode: SelectionMode,
}

impl SslConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err("beta must be in [0, 1]");
        }
        if !self.lambda0.is_finite() || self.lambda0 < 0.0 {
            return Err("lambda0 must be finite and >= 0");
        }
        Ok(())
    }
}

/// The two candidate distributions for one unlabeled sample, with their
/// confidence scores under the configured metric.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPair {
    pub global_probs: ProbVector,
    pub local_probs: ProbVector,
    pub global_conf: f64,
    pub local_conf: f64,
}

impl LogitPair {
    pub fn new(global_probs: ProbVector, local_probs: ProbVector, metric: ConfidenceMetric) -> Self {
        debug_assert_eq!(global_probs.len(), local_probs.len());
        let global_conf = metric.score(&global_probs);
        let local_conf = metric.score(&local_probs);
        Self { global_probs, local_probs, global_conf, local_conf }
    }
}

/// Outcome of thresholded pseudo-labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoLabel {
    Class(ClassLabel),
    /// Peak probability did not clear `beta`; the sample is skipped.
    Discard,
}

impl PseudoLabel {
    pub fn class(self) -> Option<ClassLabel> {
        match self {
            PseudoLabel::Class(c) => Some(c),
            PseudoLabel::Discard => None,
        }
    }
}

/// Full per-sample decision, frozen before the semi-supervised SGD phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelDecision {
    pub selected: ModelSide,
    /// Distribution of the selected (more confident) model.
    pub s_star: ProbVector,
    /// Distribution of the discarded model; constant KL target.
    pub s_minus_star: ProbVector,
    pub label: PseudoLabel,
    /// True iff the sample is accepted and the discarded model agrees on the
    /// label; only then does the KL term contribute.
    pub kl_active: bool,
    /// Consistency weight in [0, lambda0]; 0 unless `kl_active`.
    pub lambda: f64,
}

/// Binary selection per the configured mode; under `ConfidenceSelect` ties
/// go to Global. Returns `(s_star, s_minus_star, selected)`.
pub fn select_logit(pair: LogitPair, mode: SelectionMode) -> (ProbVector, ProbVector, ModelSide) {
    let pick_local = match mode {
        SelectionMode::ConfidenceSelect => pair.local_conf > pair.global_conf,
        SelectionMode::LocalOnly => true,
        SelectionMode::GlobalOnly => false,
    };
    if pick_local {
        (pair.local_probs, pair.global_probs, ModelSide::Local)
    } else {
        (pair.global_probs, pair.local_probs, ModelSide::Global)
    }
}

/// Argmax of `s_star` if its peak strictly exceeds `beta`, else discard.
/// At `beta = 1` every sample is discarded (probabilities never exceed 1).
pub fn pseudo_label(s_star: &ProbVector, beta: f64) -> PseudoLabel {
    if s_star.max() > beta {
        PseudoLabel::Class(s_star.argmax_label())
    } else {
        PseudoLabel::Discard
    }
}

/// Consistency weight `lambda0 * h(s_minus_star) / h(s_star)`, capped at
/// `lambda0` (the ratio can only exceed 1 in the forced selection modes) and
/// 0 when the selected confidence is 0 (both distributions uniform).
pub fn lambda_weight(selected_conf: f64, discarded_conf: f64, lambda0: f64) -> f64 {
    if selected_conf <= 0.0 {
        return 0.0;
    }
    lambda0 * (discarded_conf / selected_conf).min(1.0)
}

/// Composes selection, thresholding, agreement, and the consistency weight
/// into one decision record.
pub fn decide(pair: LogitPair, config: &SslConfig) -> PseudoLabelDecision {
    let (global_conf, local_conf) = (pair.global_conf, pair.local_conf);
    let (s_star, s_minus_star, selected) = select_logit(pair, config.selection_mode);
    let label = pseudo_label(&s_star, config.beta);
    let (selected_conf, discarded_conf) = match selected {
        ModelSide::Global => (global_conf, local_conf),
        ModelSide::Local => (local_conf, global_conf),
    };
    let kl_active = match label {
        PseudoLabel::Class(y) => s_minus_star.argmax_label() == y,
        PseudoLabel::Discard => false,
    };
    let lambda = if kl_active {
        lambda_weight(selected_conf, discarded_conf, config.lambda0)
    } else {
        0.0
    };
    assert!(lambda <= config.lambda0, "lambda {lambda} exceeds lambda0 {}", config.lambda0);
    PseudoLabelDecision { selected, s_star, s_minus_star, label, kl_active, lambda }
}

/// Loss, gradient, and accepted count of one semi-supervised mini-batch.
#[derive(Debug, Clone)]
pub struct SslBatchEval {
    pub loss: f64,
    /// Mean pseudo-label cross-entropy over accepted samples.
    pub ce: f64,
    /// Mean weighted consistency KL over accepted samples.
    pub kl: f64,
    pub grad: Gradient,
    pub accepted: usize,
}

/// Mean over accepted samples of
/// `CE(model on psi(x), label) + lambda * KL(model on x ‖ s_minus_star)`,
/// with decisions precomputed from the frozen global and local models.
///
/// `augment` produces the strong view psi(x); confidences and the KL term
/// use the clean features. Discarded samples contribute nothing; if the
/// whole batch is discarded the result is zero loss and zero gradient. The
/// KL term is skipped entirely (not multiplied by zero) when inactive, so
/// the gradient is bit-independent of `s_minus_star` on such samples.
pub fn semi_supervised_batch_loss(
    model: &ModelParams,
    batch: &[(&[f64], &PseudoLabelDecision)],
    mut augment: impl FnMut(&[f64]) -> Vec<f64>,
) -> NnResult<SslBatchEval> {
    let mut items: Vec<BatchItem<'_>> = Vec::with_capacity(batch.len());
    for (features, decision) in batch {
        let Some(label) = decision.label.class() else { continue };
        let mut terms = alloc::vec![LossTerm::CrossEntropy {
            input: Cow::Owned(augment(features)),
            label,
        }];
        if decision.kl_active && decision.lambda > 0.0 {
            terms.push(LossTerm::KlToTarget {
                input: Cow::Borrowed(*features),
                target: decision.s_minus_star.clone(),
                weight: decision.lambda,
            });
        }
        items.push(BatchItem { terms });
    }
    let accepted = items.len();
    if accepted == 0 {
        return Ok(SslBatchEval {
            loss: 0.0,
            ce: 0.0,
            kl: 0.0,
            grad: Gradient::zeros_like(model),
            accepted: 0,
        });
    }
    let ev = nn::backward(model, &items, None)?;
    Ok(SslBatchEval { loss: ev.loss, ce: ev.parts.ce, kl: ev.parts.kl, grad: ev.grad, accepted })
}

/// Temperature sharpening `p_i^(1/T) / sum_j p_j^(1/T)`; T < 1 sharpens.
/// Used by the UDA baseline target.
pub fn sharpen(p: &ProbVector, temperature: f64) -> ProbVector {
    debug_assert!(temperature > 0.0);
    let inv_t = 1.0 / temperature;
    let powered: Vec<f64> = p.as_slice().iter().map(|&v| libm::pow(v, inv_t)).collect();
    let sum: f64 = powered.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        // Peak so extreme that everything underflowed: return the hard label.
        let mut hard = alloc::vec![0.0; p.len()];
        hard[p.argmax()] = 1.0;
        return ProbVector::new(hard).expect("one-hot is valid");
    }
    ProbVector::new(powered.into_iter().map(|v| v / sum).collect()).expect("normalized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use crate::rng::{self, stream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn cfg(beta: f64, lambda0: f64, mode: SelectionMode) -> SslConfig {
        SslConfig { beta, lambda0, confidence_metric: ConfidenceMetric::Variance, selection_mode: mode }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(confidence_variance(&ProbVector::uniform(7)), 0.0);
        assert_relative_eq!(confidence_variance(&pv(&[1.0, 0.0])), 0.25, epsilon = 1e-15);
        assert_relative_eq!(
            confidence_variance(&pv(&[0.7, 0.2, 0.1])),
            0.068_888_888_888_888_9,
            epsilon = 1e-12
        );
    }

    #[test]
    fn neg_entropy_examples() {
        assert_relative_eq!(confidence_neg_entropy(&ProbVector::uniform(5)), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            confidence_neg_entropy(&pv(&[0.0, 1.0, 0.0])),
            libm::log(3.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            confidence_neg_entropy(&pv(&[0.5, 0.5, 0.0])),
            libm::log(3.0) - libm::log(2.0),
            epsilon = 1e-12
        );
    }

    fn pair(global: &[f64], local: &[f64]) -> LogitPair {
        LogitPair::new(pv(global), pv(local), ConfidenceMetric::Variance)
    }

    #[test]
    fn selection_follows_confidence_with_global_ties() {
        let p = pair(&[0.8, 0.1, 0.1], &[0.5, 0.3, 0.2]);
        assert!(p.global_conf > p.local_conf);
        let (_, _, side) = select_logit(p, SelectionMode::ConfidenceSelect);
        assert_eq!(side, ModelSide::Global);

        // exact tie: documented tie-break toward Global
        let p = pair(&[0.6, 0.4], &[0.4, 0.6]);
        assert_eq!(p.global_conf, p.local_conf);
        let (s, _, side) = select_logit(p, SelectionMode::ConfidenceSelect);
        assert_eq!(side, ModelSide::Global);
        assert_eq!(s.as_slice(), &[0.6, 0.4]);

        // forced mode overrides any confidence gap
        let p = pair(&[0.9, 0.05, 0.05], &[0.34, 0.33, 0.33]);
        let (_, _, side) = select_logit(p, SelectionMode::LocalOnly);
        assert_eq!(side, ModelSide::Local);
    }

    #[test]
    fn thresholding_is_strict() {
        let s = pv(&[0.7, 0.2, 0.1]);
        assert_eq!(pseudo_label(&s, 0.5), PseudoLabel::Class(ClassLabel::new(1).unwrap()));
        assert_eq!(pseudo_label(&s, 0.9), PseudoLabel::Discard);
        assert_eq!(pseudo_label(&s, 0.7), PseudoLabel::Discard);
        // beta = 1 discards everything, even a one-hot vector
        assert_eq!(pseudo_label(&pv(&[1.0, 0.0]), 1.0), PseudoLabel::Discard);
    }

    #[test]
    fn lambda_weight_examples() {
        assert_eq!(lambda_weight(0.04, 0.04, 1.0), 1.0);
        assert_eq!(lambda_weight(0.04, 0.0, 1.0), 0.0);
        assert_relative_eq!(lambda_weight(0.04, 0.01, 1.0), 0.25, epsilon = 1e-15);
        // degenerate: both uniform
        assert_eq!(lambda_weight(0.0, 0.0, 1.0), 0.0);
        // forced-mode inversion is capped at lambda0
        assert_eq!(lambda_weight(0.01, 0.04, 2.0), 2.0);
    }

    #[test]
    fn decide_composes_agreement_and_threshold() {
        // both agree on class 1, selected passes beta
        let d = decide(pair(&[0.8, 0.1, 0.1], &[0.6, 0.3, 0.1]), &cfg(0.5, 1.0, SelectionMode::ConfidenceSelect));
        assert_eq!(d.selected, ModelSide::Global);
        assert_eq!(d.label, PseudoLabel::Class(ClassLabel::new(1).unwrap()));
        assert!(d.kl_active);
        assert!(d.lambda > 0.0 && d.lambda <= 1.0);

        // disagreement on the argmax: CE-only
        let d = decide(pair(&[0.8, 0.1, 0.1], &[0.1, 0.6, 0.3]), &cfg(0.5, 1.0, SelectionMode::ConfidenceSelect));
        assert_eq!(d.label, PseudoLabel::Class(ClassLabel::new(1).unwrap()));
        assert!(!d.kl_active);
        assert_eq!(d.lambda, 0.0);

        // threshold failure: discard, no KL
        let d = decide(pair(&[0.4, 0.3, 0.3], &[0.35, 0.33, 0.32]), &cfg(0.5, 1.0, SelectionMode::ConfidenceSelect));
        assert_eq!(d.label, PseudoLabel::Discard);
        assert!(!d.kl_active);
        assert_eq!(d.lambda, 0.0);
    }

    #[test]
    fn identical_models_reduce_to_single_model_decision() {
        let probs = [0.7, 0.2, 0.1];
        let d = decide(pair(&probs, &probs), &cfg(0.5, 1.3, SelectionMode::ConfidenceSelect));
        assert_eq!(d.selected, ModelSide::Global);
        assert_eq!(d.label, PseudoLabel::Class(ClassLabel::new(1).unwrap()));
        assert!(d.kl_active);
        assert_eq!(d.lambda, 1.3);
    }

    #[test]
    fn selection_is_invariant_under_monotone_confidence_rescaling() {
        // Ordering is what matters: any strictly increasing transform of
        // both confidences leaves the choice unchanged.
        let base = pair(&[0.5, 0.3, 0.2], &[0.7, 0.2, 0.1]);
        let (_, _, side) = select_logit(base.clone(), SelectionMode::ConfidenceSelect);
        for (a, b) in [(10.0, 0.0), (3.0, 1.0), (0.5, -2.0)] {
            let mut warped = base.clone();
            warped.global_conf = a * warped.global_conf + b;
            warped.local_conf = a * warped.local_conf + b;
            let (_, _, warped_side) = select_logit(warped, SelectionMode::ConfidenceSelect);
            assert_eq!(side, warped_side);
        }
    }

    fn model(seed: u64) -> ModelParams {
        ModelParams::init(Architecture::new(alloc::vec![3, 5, 3]).unwrap(), &mut stream(seed, &[rng::INIT]))
    }

    #[test]
    fn all_discarded_batch_is_zero() {
        let m = model(1);
        let d = decide(pair(&[0.4, 0.3, 0.3], &[0.3, 0.4, 0.3]), &cfg(0.9, 1.0, SelectionMode::ConfidenceSelect));
        let x = [0.1, 0.2, 0.3];
        let ev = semi_supervised_batch_loss(&m, &[(&x[..], &d)], |f| f.to_vec()).unwrap();
        assert_eq!(ev.accepted, 0);
        assert_eq!(ev.loss, 0.0);
        assert!(ev.grad.as_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn scrambling_inactive_targets_leaves_gradient_bit_identical() {
        let m = model(2);
        let mk = |target: &[f64]| PseudoLabelDecision {
            selected: ModelSide::Global,
            s_star: pv(&[0.8, 0.1, 0.1]),
            s_minus_star: pv(target),
            label: PseudoLabel::Class(ClassLabel::new(1).unwrap()),
            kl_active: false,
            lambda: 0.0,
        };
        let x = [0.5, -0.2, 0.9];
        let d1 = mk(&[0.1, 0.8, 0.1]);
        let d2 = mk(&[0.05, 0.05, 0.9]); // scrambled target
        let a = semi_supervised_batch_loss(&m, &[(&x[..], &d1)], |f| f.to_vec()).unwrap();
        let b = semi_supervised_batch_loss(&m, &[(&x[..], &d2)], |f| f.to_vec()).unwrap();
        assert_eq!(a.accepted, 1);
        for (ga, gb) in a.grad.as_flat().iter().zip(b.grad.as_flat()) {
            assert_eq!(ga.to_bits(), gb.to_bits());
        }
    }

    #[test]
    fn lambda0_zero_is_pure_pseudo_label_ce() {
        let m = model(3);
        let config = cfg(0.5, 0.0, SelectionMode::ConfidenceSelect);
        let d = decide(pair(&[0.8, 0.1, 0.1], &[0.7, 0.2, 0.1]), &config);
        assert!(d.kl_active);
        assert_eq!(d.lambda, 0.0);
        let x = [0.5, -0.2, 0.9];
        let ev = semi_supervised_batch_loss(&m, &[(&x[..], &d)], |f| f.to_vec()).unwrap();
        assert_eq!(ev.kl, 0.0);
        assert!(ev.ce > 0.0);

        // same gradient as a hand-built CE-only item
        let items = [BatchItem::cross_entropy(&x[..], ClassLabel::new(1).unwrap())];
        let ce_only = nn::backward(&m, &items, None).unwrap();
        for (a, b) in ev.grad.as_flat().iter().zip(ce_only.grad.as_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn perfect_prediction_on_one_hot_target_has_zero_loss() {
        // Model output numerically one-hot at the pseudo-label, psi = id,
        // target = the same one-hot: CE and KL both at their minimum.
        let arch = Architecture::new(alloc::vec![2, 2]).unwrap();
        let m = ModelParams::from_flat(arch, alloc::vec![0.0, 0.0, 0.0, 0.0, 60.0, -60.0]).unwrap();
        let x = [0.0, 0.0];
        let out = nn::forward(&m, &x).unwrap();
        let d = PseudoLabelDecision {
            selected: ModelSide::Global,
            s_star: out.clone(),
            s_minus_star: out,
            label: PseudoLabel::Class(ClassLabel::new(1).unwrap()),
            kl_active: true,
            lambda: 1.0,
        };
        let ev = semi_supervised_batch_loss(&m, &[(&x[..], &d)], |f| f.to_vec()).unwrap();
        assert!(ev.loss < 1e-10, "loss = {}", ev.loss);
    }

    #[test]
    fn sharpen_peaks_the_distribution() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let s = sharpen(&p, 0.4);
        assert!(s.as_slice()[0] > 0.5);
        assert_eq!(s.argmax(), p.argmax());
        assert!(ProbVector::new(s.as_slice().to_vec()).is_ok());
    }

    proptest! {
        #[test]
        fn lambda_never_exceeds_lambda0(
            g in proptest::collection::vec(0.05f64..1.0, 4),
            l in proptest::collection::vec(0.05f64..1.0, 4),
            lambda0 in 0.0f64..3.0,
            beta in 0.0f64..1.0,
            mode_pick in 0u8..3,
        ) {
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum();
                ProbVector::new(v.iter().map(|x| x / s).collect()).unwrap()
            };
            let mode = match mode_pick {
                0 => SelectionMode::ConfidenceSelect,
                1 => SelectionMode::LocalOnly,
                _ => SelectionMode::GlobalOnly,
            };
            let config = cfg(beta, lambda0, mode);
            let d = decide(
                LogitPair::new(norm(&g), norm(&l), ConfidenceMetric::Variance),
                &config,
            );
            prop_assert!(d.lambda >= 0.0);
            prop_assert!(d.lambda <= lambda0);
            if let PseudoLabel::Class(_) = d.label {
                prop_assert!(d.s_star.max() > beta);
            }
            if d.kl_active {
                prop_assert_eq!(PseudoLabel::Class(d.s_minus_star.argmax_label()), d.label);
            }
        }
    }
}
