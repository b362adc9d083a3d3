//! Turns an [`ExperimentConfig`] into client datasets plus val/test splits.

use rand::seq::SliceRandom;

use fedssl_core::data::{
    dirichlet_partition, generate_synthetic_clustered, split_labeled_unlabeled, ClientDataset,
    FeatureShape, PartitionSpec, Sample,
};
use fedssl_core::nn::Architecture;
use fedssl_core::rng::{self, mix, stream};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::idx::load_idx;
use crate::HarnessError;

pub struct PreparedData {
    pub clients: Vec<ClientDataset>,
    /// Carved out per the configured fraction; unused by default (no
    /// automated tuning), kept for inspection.
    pub val_set: Vec<Sample>,
    pub test_set: Vec<Sample>,
    pub arch: Architecture,
    pub shape: FeatureShape,
    pub classes: u32,
}

/// Loads or generates the dataset, shuffles it once, splits train/val/test
/// by the configured fractions, spreads the training split across clients
/// with per-class Dirichlet draws, and quarantine-splits each client.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData, HarnessError> {
    let d = &cfg.dataset;
    let (mut samples, shape) = match d.kind {
        DatasetKind::Synthetic => {
            let s = generate_synthetic_clustered(d.classes, d.dim, d.signal_dims, d.per_class, d.spread, cfg.seed)?;
            (s, FeatureShape::Flat(d.dim))
        }
        DatasetKind::Idx => {
            let images = d.images.as_ref().expect("validated");
            let labels = d.labels.as_ref().expect("validated");
            let idx = load_idx(images, labels, d.classes)?;
            (idx.samples, FeatureShape::Image { rows: idx.rows, cols: idx.cols })
        }
    };

    samples.shuffle(&mut stream(cfg.seed, &[rng::TRAIN_TEST_SPLIT]));
    let n = samples.len();
    let n_train = (d.train_fraction * n as f64) as usize;
    let n_val = (d.val_fraction * n as f64) as usize;
    let test_set = samples.split_off(n_train + n_val);
    let val_set = samples.split_off(n_train);
    let train = samples;

    let spec = PartitionSpec {
        client_count: cfg.partition.clients,
        dirichlet_alpha: cfg.partition.dirichlet_alpha,
        label_ratio: cfg.partition.label_ratio,
        seed: cfg.seed,
    };
    let parts = dirichlet_partition(train, &spec)?;
    let clients = parts
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            split_labeled_unlabeled(p, cfg.partition.label_ratio, mix(cfg.seed, &[rng::SPLIT, k as u64]))
        })
        .collect();

    let arch = cfg.architecture(shape.dim())?;
    Ok(PreparedData { clients, val_set, test_set, arch, shape, classes: d.classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepare_respects_fractions_and_is_deterministic() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.classes = 4;
        cfg.dataset.dim = 6;
        cfg.dataset.per_class = 50;
        cfg.partition.clients = 5;
        let a = prepare(&cfg).unwrap();
        let b = prepare(&cfg).unwrap();

        let n = 200;
        assert_eq!(a.test_set.len(), n - (n as f64 * 0.8) as usize - (n as f64 * 0.05) as usize);
        assert_eq!(a.val_set.len(), (n as f64 * 0.05) as usize);
        let client_total: usize = a.clients.iter().map(ClientDataset::len).sum();
        assert_eq!(client_total, (n as f64 * 0.8) as usize);

        assert_eq!(a.clients, b.clients);
        assert_eq!(a.test_set, b.test_set);
        assert_eq!(a.arch.sizes(), &[6, 128, 4]);
    }

    #[test]
    fn label_ratio_controls_per_client_split() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.classes = 4;
        cfg.dataset.dim = 6;
        cfg.dataset.per_class = 50;
        cfg.partition.clients = 4;
        cfg.partition.label_ratio = 0.25;
        let prepared = prepare(&cfg).unwrap();
        for c in &prepared.clients {
            assert_eq!(c.labeled.len(), (0.25 * c.len() as f64) as usize);
        }
    }
}
