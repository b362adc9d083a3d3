//! Dataset generation, heterogeneous partitioning, labeled/unlabeled
//! splitting, and augmentation.
//!
//! Ground-truth labels of the "unlabeled" subset are retained but
//! quarantined: training code only sees features, while evaluation code can
//! read them through the explicit [`UnlabeledSample::eval_only_label`]
//! accessor to measure pseudo-label accuracy.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::nn::ClassLabel;
use crate::rng::{self, stream};

pub type DataResult<T> = Result<T, DataError>;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(&'static str),
    #[error("cannot partition {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },
    #[error("mismatch score undefined: {0} subset is empty")]
    EmptySubset(&'static str),
}

/// Layout of a feature vector; augmentation picks its transform pool by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    /// Generic vector of the given length.
    Flat(usize),
    /// Row-major grayscale image with values in [0, 1].
    Image { rows: usize, cols: usize },
}

impl FeatureShape {
    pub fn dim(&self) -> usize {
        match *self {
            FeatureShape::Flat(d) => d,
            FeatureShape::Image { rows, cols } => rows * cols,
        }
    }
}

/// One labeled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: ClassLabel,
}

/// An example whose label is hidden from training and only available to
/// evaluation code.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub features: Vec<f64>,
    quarantined: ClassLabel,
}

impl UnlabeledSample {
    pub fn new(features: Vec<f64>, quarantined: ClassLabel) -> Self {
        Self { features, quarantined }
    }

    /// The quarantined ground-truth label. Evaluation only — never feed this
    /// into a training loss.
    pub fn eval_only_label(&self) -> ClassLabel {
        self.quarantined
    }
}

/// One client's local data: the labeled subset and the quarantined
/// unlabeled subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<UnlabeledSample>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Permutes the quarantined labels in place. Audit helper: training
    /// results must be bit-identical under any scramble.
    pub fn scramble_quarantined_labels(&mut self, rng: &mut ChaCha8Rng) {
        let mut labels: Vec<ClassLabel> = self.unlabeled.iter().map(|u| u.quarantined).collect();
        labels.shuffle(rng);
        for (u, l) in self.unlabeled.iter_mut().zip(labels) {
            u.quarantined = l;
        }
    }
}

/// How to spread one dataset across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub client_count: usize,
    pub dirichlet_alpha: f64,
    /// Fraction of each client's data that keeps its label, in (0, 1].
    pub label_ratio: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> DataResult<()> {
        if self.client_count == 0 {
            return Err(DataError::InvalidSpec("client_count must be >= 1"));
        }
        if !(self.dirichlet_alpha > 0.0) || !self.dirichlet_alpha.is_finite() {
            return Err(DataError::InvalidSpec("dirichlet_alpha must be finite and > 0"));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(DataError::InvalidSpec("label_ratio must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Gaussian blobs: class `i` is centered at a deterministic point on the
/// sphere of radius `sqrt(dim)` (unit-scale coordinates), with isotropic
/// per-coordinate noise of standard deviation `spread`. The returned samples
/// are shuffled; the same arguments give bit-identical output.
pub fn generate_synthetic(
    classes: u32,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> DataResult<Vec<Sample>> {
    generate_synthetic_clustered(classes, dim, dim, per_class, spread, seed)
}

/// [`generate_synthetic`] with the class centers confined to the first
/// `signal_dims` coordinates (still on the radius-`sqrt(dim)` sphere). The
/// remaining coordinates carry pure noise, so classes share directions the
/// way natural-data classes share features: a model fitted to a few classes
/// interferes with the others, and the signal subspace must be identified
/// from data. `signal_dims = dim` gives the isotropic layout.
pub fn generate_synthetic_clustered(
    classes: u32,
    dim: usize,
    signal_dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> DataResult<Vec<Sample>> {
    if classes < 2 {
        return Err(DataError::InvalidSpec("need at least 2 classes"));
    }
    if dim < 2 {
        return Err(DataError::InvalidSpec("need feature dimension >= 2"));
    }
    if signal_dims < 2 || signal_dims > dim {
        return Err(DataError::InvalidSpec("signal_dims must be in [2, dim]"));
    }
    if per_class == 0 {
        return Err(DataError::InvalidSpec("need at least 1 sample per class"));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(DataError::InvalidSpec("spread must be finite and >= 0"));
    }

    let radius = libm::sqrt(dim as f64);
    let mut centers_rng = stream(seed, &[rng::CENTERS]);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut v = vec![0.0; dim];
            for x in v.iter_mut().take(signal_dims) {
                *x = centers_rng.sample(StandardNormal);
            }
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
            if norm < 1e-9 {
                // Degenerate draw (probability ~0): fall back to a basis axis.
                v.iter_mut().for_each(|x| *x = 0.0);
                v[c as usize % signal_dims] = 1.0;
            } else {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            v.iter_mut().for_each(|x| *x *= radius);
            v
        })
        .collect();

    let mut noise_rng = stream(seed, &[rng::NOISE]);
    let mut samples = Vec::with_capacity(classes as usize * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let features = center
                .iter()
                .map(|&m| {
                    let g: f64 = noise_rng.sample(StandardNormal);
                    m + spread * g
                })
                .collect();
            samples.push(Sample { features, label: ClassLabel::from_index(c) });
        }
    }
    samples.shuffle(&mut stream(seed, &[rng::SHUFFLE]));
    Ok(samples)
}

/// Dirichlet proportions over `m` buckets via normalized Gamma(alpha, 1)
/// draws.
fn dirichlet_proportions(alpha: f64, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("validated alpha");
    let mut draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return vec![1.0 / m as f64; m];
    }
    draws.iter_mut().for_each(|d| *d /= sum);
    draws
}

/// Splits `quota` into integer counts proportional to `props` (largest
/// remainder, ties to the lower index).
fn quota_counts(props: &[f64], quota: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * quota as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = props
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * quota as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(quota - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Distributes samples across clients with one Dirichlet(alpha) proportion
/// vector per class. Every source sample lands in exactly one client; a
/// client left empty by an extreme draw steals one sample from the currently
/// largest client.
pub fn dirichlet_partition(samples: Vec<Sample>, spec: &PartitionSpec) -> DataResult<Vec<Vec<Sample>>> {
    spec.validate()?;
    let m = spec.client_count;
    if m > samples.len() {
        return Err(DataError::TooManyClients { clients: m, samples: samples.len() });
    }

    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label.get()).or_default().push(i);
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (&class, idxs) in &by_class {
        let mut class_rng = stream(spec.seed, &[rng::PARTITION, class as u64]);
        let props = dirichlet_proportions(spec.dirichlet_alpha, m, &mut class_rng);
        let counts = quota_counts(&props, idxs.len());
        let mut cursor = 0;
        for (k, &c) in counts.iter().enumerate() {
            assignment[k].extend_from_slice(&idxs[cursor..cursor + c]);
            cursor += c;
        }
    }

    // Repair empty clients: move one sample from the largest client.
    loop {
        let Some(empty) = assignment.iter().position(Vec::is_empty) else { break };
        let donor = assignment
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let moved = assignment[donor].pop().unwrap();
        assignment[empty].push(moved);
    }

    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    Ok(assignment
        .into_iter()
        .map(|idxs| idxs.into_iter().map(|i| slots[i].take().expect("index used once")).collect())
        .collect())
}

/// Uniform random labeled/unlabeled split with `floor(ratio * n)` labeled
/// samples; the unlabeled rest keeps its labels quarantined.
pub fn split_labeled_unlabeled(samples: Vec<Sample>, label_ratio: f64, seed: u64) -> ClientDataset {
    assert!(
        label_ratio > 0.0 && label_ratio <= 1.0,
        "label_ratio must be in (0, 1], got {label_ratio}"
    );
    let n = samples.len();
    let n_labeled = (label_ratio * n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[rng::SPLIT]));
    let chosen: alloc::collections::BTreeSet<usize> = order[..n_labeled].iter().copied().collect();

    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(n - n_labeled);
    for (i, s) in samples.into_iter().enumerate() {
        if chosen.contains(&i) {
            labeled.push(s);
        } else {
            unlabeled.push(UnlabeledSample::new(s.features, s.label));
        }
    }
    ClientDataset { labeled, unlabeled }
}

/// Class-distribution mismatch of one client: total-variation distance
/// between the label histogram of the labeled subset and the (quarantined)
/// histogram of the unlabeled subset. In [0, 1].
pub fn mismatch_score(client: &ClientDataset) -> DataResult<f64> {
    if client.labeled.is_empty() {
        return Err(DataError::EmptySubset("labeled"));
    }
    if client.unlabeled.is_empty() {
        return Err(DataError::EmptySubset("unlabeled"));
    }
    let mut hist: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    let nl = client.labeled.len() as f64;
    let nu = client.unlabeled.len() as f64;
    for s in &client.labeled {
        hist.entry(s.label.get()).or_default().0 += 1.0 / nl;
    }
    for u in &client.unlabeled {
        hist.entry(u.eval_only_label().get()).or_default().1 += 1.0 / nu;
    }
    Ok(0.5 * hist.values().map(|(l, u)| (l - u).abs()).sum::<f64>())
}

// --- augmentation -----------------------------------------------------

const IMAGE_OP_COUNT: u32 = 10;

/// Weak view: additive N(0, 0.01^2) noise for generic vectors, a +-1 pixel
/// shift per axis for images.
pub fn augment_weak(features: &[f64], shape: FeatureShape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match shape {
        FeatureShape::Flat(_) => features
            .iter()
            .map(|&x| {
                let g: f64 = rng.sample(StandardNormal);
                x + 0.01 * g
            })
            .collect(),
        FeatureShape::Image { rows, cols } => {
            let dr: i64 = rng.random_range(-1..=1);
            let dc: i64 = rng.random_range(-1..=1);
            shift_image(features, rows, cols, dr, dc)
        }
    }
}

/// Strong view at intensity `magnitude / 30`.
///
/// Images draw `n_ops` transforms from a ten-op pool (identity, rotate,
/// translate x/y, shear x/y, brightness, contrast, invert, solarize) and
/// stay clamped to [0, 1]. Generic vectors get RMS-scaled noise plus random
/// coordinate masking. `magnitude = 0` is the identity.
pub fn augment_strong(
    features: &[f64],
    shape: FeatureShape,
    n_ops: u32,
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    debug_assert!((0.0..=30.0).contains(&magnitude), "magnitude out of [0, 30]");
    let intensity = (magnitude / 30.0).clamp(0.0, 1.0);
    match shape {
        FeatureShape::Flat(_) => {
            let rms = libm::sqrt(
                features.iter().map(|x| x * x).sum::<f64>() / features.len().max(1) as f64,
            );
            let sigma = 0.5 * intensity * rms;
            let mask_p = 0.3 * intensity;
            let mut out: Vec<f64> = features
                .iter()
                .map(|&x| {
                    let g: f64 = rng.sample(StandardNormal);
                    x + sigma * g
                })
                .collect();
            for v in out.iter_mut() {
                if rng.random::<f64>() < mask_p {
                    *v = 0.0;
                }
            }
            out
        }
        FeatureShape::Image { rows, cols } => {
            let mut img = features.to_vec();
            for _ in 0..n_ops {
                let op = rng.random_range(0..IMAGE_OP_COUNT);
                img = apply_image_op(op, &img, rows, cols, intensity, rng);
            }
            for v in img.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            img
        }
    }
}

fn rand_sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn apply_image_op(
    op: u32,
    img: &[f64],
    rows: usize,
    cols: usize,
    intensity: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    match op {
        0 => img.to_vec(),
        1 => {
            let theta = rand_sign(rng) * intensity * core::f64::consts::FRAC_PI_6;
            rotate_image(img, rows, cols, theta)
        }
        2 => {
            let d = libm::round(rand_sign(rng) * intensity * 0.3 * cols as f64) as i64;
            shift_image(img, rows, cols, 0, d)
        }
        3 => {
            let d = libm::round(rand_sign(rng) * intensity * 0.3 * rows as f64) as i64;
            shift_image(img, rows, cols, d, 0)
        }
        4 => shear_image(img, rows, cols, rand_sign(rng) * intensity * 0.3, true),
        5 => shear_image(img, rows, cols, rand_sign(rng) * intensity * 0.3, false),
        6 => {
            let delta = rand_sign(rng) * intensity * 0.5;
            img.iter().map(|&x| x + delta).collect()
        }
        7 => {
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            let gain = 1.0 + rand_sign(rng) * intensity * 0.8;
            img.iter().map(|&x| mean + gain * (x - mean)).collect()
        }
        8 => img.iter().map(|&x| x + intensity * (1.0 - 2.0 * x)).collect(),
        _ => {
            let threshold = 1.0 - 0.7 * intensity;
            img.iter().map(|&x| if x > threshold { 1.0 - x } else { x }).collect()
        }
    }
}

fn shift_image(img: &[f64], rows: usize, cols: usize, dr: i64, dc: i64) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            let (sr, sc) = (r - dr, c - dc);
            if sr >= 0 && sc >= 0 && (sr as usize) < rows && (sc as usize) < cols {
                out[r as usize * cols as usize + c as usize] =
                    img[sr as usize * cols + sc as usize];
            }
        }
    }
    out
}

fn bilinear(img: &[f64], rows: usize, cols: usize, r: f64, c: f64) -> f64 {
    let r0 = libm::floor(r);
    let c0 = libm::floor(c);
    let (dr, dc) = (r - r0, c - c0);
    let mut acc = 0.0;
    for (ri, wr) in [(r0, 1.0 - dr), (r0 + 1.0, dr)] {
        for (ci, wc) in [(c0, 1.0 - dc), (c0 + 1.0, dc)] {
            if ri >= 0.0 && ci >= 0.0 && (ri as usize) < rows && (ci as usize) < cols && wr * wc > 0.0
            {
                acc += wr * wc * img[ri as usize * cols + ci as usize];
            }
        }
    }
    acc
}

fn rotate_image(img: &[f64], rows: usize, cols: usize, theta: f64) -> Vec<f64> {
    let (s, co) = (libm::sin(theta), libm::cos(theta));
    let (cr, cc) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64 - cr, c as f64 - cc);
            // inverse rotation of the target coordinate
            let sr = co * y + s * x + cr;
            let sc = -s * y + co * x + cc;
            out[r * cols + c] = bilinear(img, rows, cols, sr, sc);
        }
    }
    out
}

fn shear_image(img: &[f64], rows: usize, cols: usize, factor: f64, horizontal: bool) -> Vec<f64> {
    let (cr, cc) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64 - cr, c as f64 - cc);
            let (sy, sx) = if horizontal { (y, x - factor * y) } else { (y - factor * x, x) };
            out[r * cols + c] = bilinear(img, rows, cols, sy + cr, sx + cc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn zero_spread_collapses_to_centers_and_nearest_centroid_is_perfect() {
        let samples = generate_synthetic(4, 8, 30, 0.0, 7).unwrap();
        let mut centers: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for s in &samples {
            let c = centers.entry(s.label.get()).or_insert_with(|| s.features.clone());
            assert_eq!(&s.features, c, "spread 0 must reproduce the class center exactly");
        }
        // centers sit on the sphere of radius sqrt(d)
        for c in centers.values() {
            let norm = libm::sqrt(c.iter().map(|x| x * x).sum::<f64>());
            assert!((norm - libm::sqrt(8.0)).abs() < 1e-9);
        }
        // 1-nearest-centroid classifies everything correctly
        for s in &samples {
            let best = centers
                .iter()
                .min_by(|a, b| {
                    let da: f64 = a.1.iter().zip(&s.features).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = b.1.iter().zip(&s.features).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(k, _)| *k)
                .unwrap();
            assert_eq!(best, s.label.get());
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let a = generate_synthetic(3, 5, 40, 0.7, 99).unwrap();
        let b = generate_synthetic(3, 5, 40, 0.7, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(3, 5, 40, 0.7, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generation_validates_inputs() {
        assert!(generate_synthetic(1, 5, 10, 0.5, 0).is_err());
        assert!(generate_synthetic(3, 1, 10, 0.5, 0).is_err());
        assert!(generate_synthetic(3, 5, 0, 0.5, 0).is_err());
        assert!(generate_synthetic(3, 5, 10, -0.5, 0).is_err());
    }

    fn spec(m: usize, alpha: f64, seed: u64) -> PartitionSpec {
        PartitionSpec { client_count: m, dirichlet_alpha: alpha, label_ratio: 0.5, seed }
    }

    fn class_hist(samples: &[Sample], classes: u32) -> Vec<f64> {
        let mut h = vec![0.0; classes as usize];
        for s in samples {
            h[s.label.index()] += 1.0;
        }
        let n: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= n.max(1.0));
        h
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    #[test]
    fn partition_is_exact_and_deterministic() {
        let samples = generate_synthetic(5, 4, 100, 0.5, 3).unwrap();
        let total = samples.len();
        let parts = dirichlet_partition(samples.clone(), &spec(8, 0.1, 17)).unwrap();
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), total);
        assert!(parts.iter().all(|p| !p.is_empty()));

        // every source sample appears exactly once
        let mut seen: Vec<&Sample> = parts.iter().flatten().collect();
        let mut orig: Vec<&Sample> = samples.iter().collect();
        let key =
            |s: &&Sample| (s.label.get(), s.features.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
        seen.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(seen, orig);

        let again = dirichlet_partition(samples, &spec(8, 0.1, 17)).unwrap();
        assert_eq!(parts, again);
    }

    #[test]
    fn single_client_takes_everything() {
        let samples = generate_synthetic(3, 4, 20, 0.5, 3).unwrap();
        let parts = dirichlet_partition(samples.clone(), &spec(1, 0.1, 5)).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), samples.len());
    }

    #[test]
    fn too_many_clients_is_an_error() {
        let samples = generate_synthetic(2, 4, 3, 0.5, 3).unwrap();
        assert_eq!(
            dirichlet_partition(samples, &spec(7, 0.1, 5)),
            Err(DataError::TooManyClients { clients: 7, samples: 6 })
        );
    }

    #[test]
    fn near_uniform_alpha_matches_global_histogram() {
        let samples = generate_synthetic(4, 4, 500, 0.5, 11).unwrap();
        let global = class_hist(&samples, 4);
        let parts = dirichlet_partition(samples, &spec(10, 1e6, 11)).unwrap();
        for p in &parts {
            assert!(tv(&class_hist(p, 4), &global) < 0.05);
        }
    }

    #[test]
    fn smaller_alpha_is_more_heterogeneous() {
        let samples = generate_synthetic(10, 4, 120, 0.5, 23).unwrap();
        let global = class_hist(&samples, 10);
        let mean_tv = |alpha: f64| {
            let parts = dirichlet_partition(samples.clone(), &spec(20, alpha, 23)).unwrap();
            parts.iter().map(|p| tv(&class_hist(p, 10), &global)).sum::<f64>() / parts.len() as f64
        };
        let sharp = mean_tv(0.1);
        let mild = mean_tv(1.0);
        assert!(sharp > mild, "Dir(0.1) TV {sharp} should exceed Dir(1.0) TV {mild}");
    }

    #[test]
    fn split_ratio_one_has_no_unlabeled() {
        let samples = generate_synthetic(3, 4, 10, 0.5, 3).unwrap();
        let n = samples.len();
        let ds = split_labeled_unlabeled(samples, 1.0, 4);
        assert_eq!(ds.labeled.len(), n);
        assert!(ds.unlabeled.is_empty());
    }

    #[test]
    fn split_uses_floor_rounding() {
        let samples: Vec<Sample> = (0..10)
            .map(|i| Sample { features: vec![i as f64, 0.0], label: ClassLabel::from_index(i % 2) })
            .collect();
        let ds = split_labeled_unlabeled(samples, 0.2, 4);
        assert_eq!(ds.labeled.len(), 2);
        assert_eq!(ds.unlabeled.len(), 8);
    }

    #[test]
    fn scarce_labels_show_mismatch_for_most_seeds() {
        // 10-class client, 20% labels: the labeled histogram rarely matches
        // the unlabeled one without any artificial biasing.
        let mut positive = 0;
        for seed in 0..10u64 {
            let samples = generate_synthetic(10, 4, 10, 0.5, seed).unwrap();
            let ds = split_labeled_unlabeled(samples, 0.2, seed);
            if mismatch_score(&ds).unwrap() > 0.0 {
                positive += 1;
            }
        }
        assert!(positive >= 8, "only {positive}/10 seeds showed mismatch");
    }

    fn tiny_client(labeled: &[u32], unlabeled: &[u32]) -> ClientDataset {
        ClientDataset {
            labeled: labeled
                .iter()
                .map(|&l| Sample { features: vec![0.0, 0.0], label: ClassLabel::new(l).unwrap() })
                .collect(),
            unlabeled: unlabeled
                .iter()
                .map(|&l| UnlabeledSample::new(vec![0.0, 0.0], ClassLabel::new(l).unwrap()))
                .collect(),
        }
    }

    #[test]
    fn mismatch_score_examples() {
        assert_eq!(mismatch_score(&tiny_client(&[1, 2], &[1, 2])).unwrap(), 0.0);
        assert_eq!(mismatch_score(&tiny_client(&[1, 1], &[2, 3])).unwrap(), 1.0);
        // p_L = [1, 0], p_U = [0.5, 0.5]
        assert_eq!(mismatch_score(&tiny_client(&[1, 1], &[1, 2])).unwrap(), 0.5);
        assert_eq!(mismatch_score(&tiny_client(&[], &[1])), Err(DataError::EmptySubset("labeled")));
        assert_eq!(mismatch_score(&tiny_client(&[1], &[])), Err(DataError::EmptySubset("unlabeled")));
    }

    #[test]
    fn zero_magnitude_strong_augment_is_identity() {
        let mut r = stream(5, &[crate::rng::DIAGNOSTIC]);
        let x = vec![0.3, -0.8, 1.2, 0.0];
        let out = augment_strong(&x, FeatureShape::Flat(4), 1, 0.0, &mut r);
        assert_eq!(out, x);

        let img: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let out = augment_strong(&img, FeatureShape::Image { rows: 4, cols: 4 }, 2, 0.0, &mut r);
        assert_eq!(out, img);
    }

    #[test]
    fn identity_op_is_exact() {
        let mut r = stream(6, &[crate::rng::DIAGNOSTIC]);
        let img: Vec<f64> = (0..16).map(|i| (i % 3) as f64 / 2.0).collect();
        let out = apply_image_op(0, &img, 4, 4, 1.0, &mut r);
        assert_eq!(out, img);
    }

    #[test]
    fn weak_augment_keeps_images_in_unit_range() {
        let mut r = stream(7, &[crate::rng::DIAGNOSTIC]);
        let img: Vec<f64> = (0..25).map(|i| i as f64 / 24.0).collect();
        for _ in 0..20 {
            let out = augment_weak(&img, FeatureShape::Image { rows: 5, cols: 5 }, &mut r);
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    proptest! {
        #[test]
        fn augmentations_stay_finite(seed in 0u64..200, magnitude in 0.0f64..30.0) {
            let mut r = stream(seed, &[crate::rng::DIAGNOSTIC, 40]);
            let x: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) / 3.0).collect();
            let flat = augment_strong(&x, FeatureShape::Flat(9), 2, magnitude, &mut r);
            prop_assert!(flat.iter().all(|v| v.is_finite()));

            let img: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
            let strong = augment_strong(&img, FeatureShape::Image { rows: 3, cols: 3 }, 2, magnitude, &mut r);
            prop_assert!(strong.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));

            let weak = augment_weak(&x, FeatureShape::Flat(9), &mut r);
            prop_assert!(weak.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn split_is_deterministic_and_partitions(seed in 0u64..100, ratio in 0.05f64..1.0) {
            let samples = generate_synthetic(3, 4, 15, 0.5, seed).unwrap();
            let n = samples.len();
            let a = split_labeled_unlabeled(samples.clone(), ratio, seed);
            let b = split_labeled_unlabeled(samples, ratio, seed);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.labeled.len(), (ratio * n as f64) as usize);
            prop_assert_eq!(a.labeled.len() + a.unlabeled.len(), n);
        }
    }
}
