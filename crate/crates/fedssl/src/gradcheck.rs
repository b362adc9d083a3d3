//! Finite-difference gradient audit, exposed as `fedssl gradcheck`.
//!
//! Runs the analytic backward pass against central differences on seeded
//! random models and batches, for each loss composition the protocol uses:
//! plain cross-entropy, cross-entropy plus a weighted KL-to-target term,
//! and cross-entropy plus a proximal anchor.

use rand::Rng;

use fedssl_core::nn::{
    finite_diff_check, Architecture, BatchItem, ClassLabel, LossTerm, ModelParams, ProbVector,
    ProxTerm,
};
use fedssl_core::rng::{self, stream};

use crate::HarnessError;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub seed: u64,
    pub spec: &'static str,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub max: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max <= TOLERANCE
    }

    /// Worst error per loss spec, in first-seen order.
    pub fn per_spec(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = Vec::new();
        for row in &self.rows {
            match out.iter_mut().find(|(s, _)| *s == row.spec) {
                Some((_, m)) => *m = m.max(row.error),
                None => out.push((row.spec, row.error)),
            }
        }
        out
    }
}

pub fn run_gradcheck(seeds: u64) -> Result<GradcheckReport, HarnessError> {
    let mut rows = Vec::with_capacity(seeds as usize * 3);
    let mut max = 0.0f64;
    for seed in 0..seeds {
        let mut r = stream(seed, &[rng::DIAGNOSTIC, GRADCHECK_TAG]);
        let dim = 4 + (seed % 4) as usize;
        let hidden = 5 + (seed % 5) as usize;
        let classes = 3 + (seed % 3) as usize;
        let arch = Architecture::new(vec![dim, hidden, classes]).unwrap();
        let model = ModelParams::init(arch.clone(), &mut r);
        let anchor = ModelParams::init(arch, &mut r);

        let random_target = |r: &mut fedssl_core::rng::ChaCha8Rng| {
            let mut t: Vec<f64> = (0..classes).map(|_| r.random::<f64>() + 0.05).collect();
            let s: f64 = t.iter().sum();
            t.iter_mut().for_each(|v| *v /= s);
            ProbVector::new(t).unwrap()
        };
        let mut items_ce: Vec<BatchItem<'static>> = Vec::new();
        let mut items_kl: Vec<BatchItem<'static>> = Vec::new();
        for _ in 0..3 {
            let x: Vec<f64> = (0..dim).map(|_| 2.0 * r.random::<f64>() - 1.0).collect();
            let y = ClassLabel::from_index(r.random_range(0..classes));
            items_ce.push(BatchItem::cross_entropy(x.clone(), y));
            items_kl.push(BatchItem {
                terms: vec![
                    LossTerm::CrossEntropy { input: x.clone().into(), label: y },
                    LossTerm::KlToTarget { input: x.into(), target: random_target(&mut r), weight: 0.7 },
                ],
            });
        }

        let specs: [(&'static str, f64); 3] = [
            ("ce", finite_diff_check(&model, &items_ce, None)?),
            ("ce+kl", finite_diff_check(&model, &items_kl, None)?),
            (
                "ce+prox",
                finite_diff_check(&model, &items_ce, Some(ProxTerm { anchor: &anchor, mu: 0.1 }))?,
            ),
        ];
        for (spec, error) in specs {
            max = max.max(error);
            rows.push(GradcheckRow { seed, spec, error });
        }
    }
    Ok(GradcheckReport { rows, max })
}

// Tag for the gradcheck stream, kept out of the core tag namespace.
const GRADCHECK_TAG: u64 = 0x6763;
