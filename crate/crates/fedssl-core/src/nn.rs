//! Dense softmax classifier with manual backpropagation.
//!
//! The model is a multi-layer perceptron: tanh hidden layers, softmax output,
//! all parameters in one flat `f64` buffer so that deltas, gradients, and
//! checkpoints are trivially shape-congruent. All operations are pure
//! functions of their inputs and use fixed summation orders, so results are
//! bit-reproducible.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Clamp applied inside every `log` so saturated softmax outputs cannot
/// produce NaN; small enough not to bias any loss measurably.
pub const LOG_EPS: f64 = 1e-12;

/// Central-difference step used by [`finite_diff_check`].
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of the relative-error metric in [`finite_diff_check`]:
/// coordinates where both gradients are below this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

pub type NnResult<T> = Result<T, NnError>;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(&'static str),
    #[error("invalid probability vector: {0}")]
    InvalidProbVector(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("non-finite gradient entry at flat index {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite parameter entry at flat index {index}")]
    NonFiniteParams { index: usize },
    #[error("learning rate must be finite and >= 0, got {0}")]
    InvalidLearningRate(f64),
}

/// 1-based class label; 0 is reserved for "discard" in the pseudo-labeling
/// layer, so a constructed label always names a real class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassLabel(u32);

impl ClassLabel {
    pub fn new(label: u32) -> Option<Self> {
        (label >= 1).then_some(Self(label))
    }

    /// Label for the 0-based class index `i`.
    pub fn from_index(i: usize) -> Self {
        Self(i as u32 + 1)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// 0-based index into probability vectors.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

/// A discrete distribution over classes: entries in [0, 1] summing to 1
/// within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> NnResult<Self> {
        if probs.is_empty() {
            return Err(NnError::InvalidProbVector("empty"));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(NnError::InvalidProbVector("entry outside [0, 1]"));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NnError::InvalidProbVector("sum not 1 within 1e-6"));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::MIN, f64::max)
    }

    /// Index of the largest entry; ties resolve to the first occurrence.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Label of the largest entry.
    pub fn argmax_label(&self) -> ClassLabel {
        ClassLabel::from_index(self.argmax())
    }

    fn from_softmax(probs: Vec<f64>) -> Self {
        debug_assert!(Self::new(probs.clone()).is_ok());
        Self(probs)
    }
}

/// Layer widths of a dense network, input first, class count last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    sizes: Vec<usize>,
    // (weight offset, bias offset) per layer into the flat buffer
    offsets: Vec<(usize, usize)>,
    total: usize,
}

impl Architecture {
    pub fn new(sizes: Vec<usize>) -> NnResult<Self> {
        if sizes.len() < 2 {
            return Err(NnError::InvalidArchitecture("need at least input and output widths"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(NnError::InvalidArchitecture("zero-width layer"));
        }
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut total = 0;
        for l in 0..sizes.len() - 1 {
            let w_off = total;
            total += sizes[l] * sizes[l + 1];
            let b_off = total;
            total += sizes[l + 1];
            offsets.push((w_off, b_off));
        }
        Ok(Self { sizes, offsets, total })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.total
    }

    fn layer<'a>(&self, flat: &'a [f64], l: usize) -> (&'a [f64], &'a [f64], usize, usize) {
        let (w_off, b_off) = self.offsets[l];
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        (&flat[w_off..w_off + inp * out], &flat[b_off..b_off + out], inp, out)
    }

    fn layer_mut<'a>(
        &self,
        flat: &'a mut [f64],
        l: usize,
    ) -> (&'a mut [f64], &'a mut [f64], usize, usize) {
        let (w_off, b_off) = self.offsets[l];
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        let (head, tail) = flat.split_at_mut(b_off);
        (&mut head[w_off..], &mut tail[..out], inp, out)
    }
}

/// All parameters of one model in a single flat buffer. Layout per layer:
/// weights row-major (out x in), then bias; layers in order. `flatten` /
/// `from_flat` round-trip bit-exactly, and the same layout backs checkpoints
/// and aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    flat: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let flat = vec![0.0; arch.param_count()];
        Self { arch, flat }
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], weights then bias
    /// per layer, drawn in flat order.
    pub fn init(arch: Architecture, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Self::zeros(arch);
        for l in 0..m.arch.layer_count() {
            let bound = 1.0 / libm::sqrt(m.arch.sizes[l] as f64);
            let (w_off, b_off) = m.arch.offsets[l];
            let end = b_off + m.arch.sizes[l + 1];
            for v in &mut m.flat[w_off..end] {
                *v = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        m
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.flat.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.flat.clone()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn from_flat(arch: Architecture, flat: Vec<f64>) -> NnResult<Self> {
        if flat.len() != arch.param_count() {
            return Err(NnError::DimensionMismatch {
                what: "flat parameter vector",
                expected: arch.param_count(),
                got: flat.len(),
            });
        }
        Ok(Self { arch, flat })
    }

    /// Flat index of the first non-finite entry, if any.
    pub fn non_finite_index(&self) -> Option<usize> {
        self.flat.iter().position(|v| !v.is_finite())
    }

    /// `self - base`, the update a client sends to the server.
    pub fn delta_from(&self, base: &ModelParams) -> NnResult<ParamDelta> {
        if base.flat.len() != self.flat.len() {
            return Err(NnError::DimensionMismatch {
                what: "delta base",
                expected: self.flat.len(),
                got: base.flat.len(),
            });
        }
        Ok(ParamDelta(
            self.flat.iter().zip(&base.flat).map(|(a, b)| a - b).collect(),
        ))
    }

    /// In-place `self += scale * delta`.
    pub fn add_scaled_delta(&mut self, scale: f64, delta: &ParamDelta) -> NnResult<()> {
        if delta.0.len() != self.flat.len() {
            return Err(NnError::DimensionMismatch {
                what: "delta",
                expected: self.flat.len(),
                got: delta.0.len(),
            });
        }
        for (w, d) in self.flat.iter_mut().zip(&delta.0) {
            *w += scale * d;
        }
        Ok(())
    }
}

/// Parameter-space displacement (same layout as [`ModelParams`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDelta(Vec<f64>);

impl ParamDelta {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.0.iter().map(|v| v * v).sum())
    }

    /// In-place `self += other`.
    pub fn add(&mut self, other: &ParamDelta) -> NnResult<()> {
        if other.0.len() != self.0.len() {
            return Err(NnError::DimensionMismatch {
                what: "delta sum",
                expected: self.0.len(),
                got: other.0.len(),
            });
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        Ok(())
    }
}

/// Gradient of a batch loss; same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    flat: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self { flat: vec![0.0; params.param_count()] }
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn non_finite_index(&self) -> Option<usize> {
        self.flat.iter().position(|v| !v.is_finite())
    }
}

/// One loss contribution of one training item. The model distribution is
/// always the softmax output on `input`; targets are constants (no gradient
/// flows into them).
#[derive(Debug, Clone)]
pub enum LossTerm<'a> {
    /// `-log p[label]`
    CrossEntropy { input: Cow<'a, [f64]>, label: ClassLabel },
    /// `weight * KL(model ‖ target)` — model distribution first.
    KlToTarget { input: Cow<'a, [f64]>, target: ProbVector, weight: f64 },
    /// `weight * KL(target ‖ model)` — model distribution second.
    KlFromTarget { input: Cow<'a, [f64]>, target: ProbVector, weight: f64 },
}

/// One training item: the sum of its terms enters the batch mean once.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub terms: Vec<LossTerm<'a>>,
}

impl<'a> BatchItem<'a> {
    pub fn cross_entropy(input: impl Into<Cow<'a, [f64]>>, label: ClassLabel) -> Self {
        Self { terms: vec![LossTerm::CrossEntropy { input: input.into(), label }] }
    }
}

/// Parameter-space proximal penalty `mu/2 * ||w - anchor||^2`.
#[derive(Debug, Clone, Copy)]
pub struct ProxTerm<'a> {
    pub anchor: &'a ModelParams,
    pub mu: f64,
}

/// Batch loss split by term kind (means over items).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub kl: f64,
    pub prox: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ce + self.kl + self.prox
    }
}

/// Result of a batch backward pass.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub parts: LossParts,
    pub grad: Gradient,
}

/// Scratch buffers reused across forward/backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    // acts[0] = input, acts[l] = activations after layer l (last = probs)
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub fn for_arch(arch: &Architecture) -> Self {
        let acts = arch.sizes.iter().map(|&s| vec![0.0; s]).collect();
        let widest = *arch.sizes.iter().max().unwrap();
        Self { acts, delta: vec![0.0; widest], delta_prev: vec![0.0; widest] }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n4 = a.len() / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut j = 0;
    while j < n4 {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
        j += 4;
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for k in n4..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Numerically stable in-place softmax.
fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::MIN, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn forward_into(params: &ModelParams, input: &[f64], ws: &mut Workspace) -> NnResult<()> {
    let arch = &params.arch;
    if input.len() != arch.input_dim() {
        return Err(NnError::DimensionMismatch {
            what: "forward input",
            expected: arch.input_dim(),
            got: input.len(),
        });
    }
    ws.acts[0].copy_from_slice(input);
    let last = arch.layer_count() - 1;
    for l in 0..arch.layer_count() {
        let (w, b, inp, out) = arch.layer(&params.flat, l);
        // split_at_mut so we can read acts[l] while writing acts[l+1]
        let (lo, hi) = ws.acts.split_at_mut(l + 1);
        let x = &lo[l][..inp];
        let a = &mut hi[0][..out];
        for o in 0..out {
            let z = b[o] + dot(&w[o * inp..(o + 1) * inp], x);
            a[o] = if l == last { z } else { libm::tanh(z) };
        }
        if l == last {
            softmax_in_place(a);
        }
    }
    Ok(())
}

/// Softmax output of the model on `input`; deterministic and side-effect
/// free. Zero parameters give the uniform distribution.
pub fn forward(params: &ModelParams, input: &[f64]) -> NnResult<ProbVector> {
    let mut ws = Workspace::for_arch(&params.arch);
    forward_with(params, input, &mut ws)
}

/// [`forward`] with caller-provided scratch space.
pub fn forward_with(params: &ModelParams, input: &[f64], ws: &mut Workspace) -> NnResult<ProbVector> {
    forward_into(params, input, ws)?;
    Ok(ProbVector::from_softmax(ws.acts.last().unwrap().clone()))
}

/// `-log pred[label]`, clamped at [`LOG_EPS`]. Always >= 0.
pub fn cross_entropy(pred: &ProbVector, label: ClassLabel) -> NnResult<f64> {
    let i = label.index();
    if i >= pred.len() {
        return Err(NnError::LabelOutOfRange { label: label.get(), classes: pred.len() });
    }
    Ok(-libm::log(pred.as_slice()[i].max(LOG_EPS)))
}

/// `KL(p ‖ q) = sum_i p_i log(p_i / q_i)` with `0 log 0 = 0` and q clamped
/// at [`LOG_EPS`]. Nonnegative; zero iff `p == q`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> NnResult<f64> {
    if p.len() != q.len() {
        return Err(NnError::DimensionMismatch {
            what: "kl_divergence",
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi > 0.0 {
            kl += pi * (libm::log(pi.max(LOG_EPS)) - libm::log(qi.max(LOG_EPS)));
        }
    }
    Ok(kl.max(0.0))
}

struct TermEval {
    loss: f64,
    is_ce: bool,
}

/// Loss value of one term plus dL/dz at the output layer, written to `dz`
/// scaled by `scale`. Shares the closed softmax-Jacobian forms with
/// `batch_loss`, so finite differences check the whole path.
fn term_output_delta(
    params: &ModelParams,
    term: &LossTerm<'_>,
    ws: &mut Workspace,
    dz: &mut [f64],
    scale: f64,
) -> NnResult<TermEval> {
    let classes = params.arch.class_count();
    match term {
        LossTerm::CrossEntropy { input, label } => {
            if label.index() >= classes {
                return Err(NnError::LabelOutOfRange { label: label.get(), classes });
            }
            forward_into(params, input, ws)?;
            let p = ws.acts.last().unwrap();
            let loss = -libm::log(p[label.index()].max(LOG_EPS));
            for j in 0..classes {
                let ind = if j == label.index() { 1.0 } else { 0.0 };
                dz[j] = scale * (p[j] - ind);
            }
            Ok(TermEval { loss, is_ce: true })
        }
        LossTerm::KlToTarget { input, target, weight } => {
            check_target(classes, target)?;
            forward_into(params, input, ws)?;
            let p = ws.acts.last().unwrap();
            let mut kl = 0.0;
            for j in 0..classes {
                if p[j] > 0.0 {
                    kl += p[j]
                        * (libm::log(p[j].max(LOG_EPS)) - libm::log(target.as_slice()[j].max(LOG_EPS)));
                }
            }
            // d/dz_j of KL(p ‖ t) through softmax: p_j (log(p_j/t_j) - KL)
            for j in 0..classes {
                let lr = libm::log(p[j].max(LOG_EPS)) - libm::log(target.as_slice()[j].max(LOG_EPS));
                dz[j] = scale * weight * p[j] * (lr - kl);
            }
            Ok(TermEval { loss: weight * kl, is_ce: false })
        }
        LossTerm::KlFromTarget { input, target, weight } => {
            check_target(classes, target)?;
            forward_into(params, input, ws)?;
            let p = ws.acts.last().unwrap();
            let mut kl = 0.0;
            for j in 0..classes {
                let tj = target.as_slice()[j];
                if tj > 0.0 {
                    kl += tj * (libm::log(tj.max(LOG_EPS)) - libm::log(p[j].max(LOG_EPS)));
                }
            }
            // d/dz_j of KL(t ‖ p) through softmax: p_j - t_j
            for j in 0..classes {
                dz[j] = scale * weight * (p[j] - target.as_slice()[j]);
            }
            Ok(TermEval { loss: weight * kl.max(0.0), is_ce: false })
        }
    }
}

fn check_target(classes: usize, target: &ProbVector) -> NnResult<()> {
    if target.len() != classes {
        return Err(NnError::DimensionMismatch {
            what: "loss target",
            expected: classes,
            got: target.len(),
        });
    }
    Ok(())
}

/// Backpropagates `dz` (dL/dz at the output layer) into `grad`, assuming
/// `ws.acts` holds the forward activations of the same input.
fn backprop_into(params: &ModelParams, ws: &mut Workspace, grad: &mut Gradient) {
    let arch = &params.arch;
    for l in (0..arch.layer_count()).rev() {
        let (w, _, inp, out) = arch.layer(&params.flat, l);
        let (gw, gb, _, _) = arch.layer_mut(&mut grad.flat, l);
        let x = &ws.acts[l][..inp];
        for o in 0..out {
            let d = ws.delta[o];
            gb[o] += d;
            let row = &mut gw[o * inp..(o + 1) * inp];
            for i in 0..inp {
                row[i] += d * x[i];
            }
        }
        if l > 0 {
            let dp = &mut ws.delta_prev[..inp];
            dp.fill(0.0);
            for o in 0..out {
                let d = ws.delta[o];
                let row = &w[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    dp[i] += d * row[i];
                }
            }
            // tanh'(z) = 1 - a^2
            for i in 0..inp {
                let a = ws.acts[l][i];
                ws.delta[i] = dp[i] * (1.0 - a * a);
            }
        }
    }
}

/// Gradient (and loss) of the mean item loss plus optional proximal term.
///
/// Targets in KL terms are constants: no gradient flows into them.
pub fn backward(
    params: &ModelParams,
    items: &[BatchItem<'_>],
    prox: Option<ProxTerm<'_>>,
) -> NnResult<BatchEval> {
    if items.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut ws = Workspace::for_arch(&params.arch);
    let mut grad = Gradient::zeros_like(params);
    let classes = params.arch.class_count();
    let scale = 1.0 / items.len() as f64;
    let mut parts = LossParts::default();
    for item in items {
        for term in &item.terms {
            let mut dz = vec![0.0; classes];
            let ev = term_output_delta(params, term, &mut ws, &mut dz, scale)?;
            if ev.is_ce {
                parts.ce += scale * ev.loss;
            } else {
                parts.kl += scale * ev.loss;
            }
            ws.delta[..classes].copy_from_slice(&dz);
            backprop_into(params, &mut ws, &mut grad);
        }
    }
    if let Some(p) = prox {
        if p.anchor.param_count() != params.param_count() {
            return Err(NnError::DimensionMismatch {
                what: "prox anchor",
                expected: params.param_count(),
                got: p.anchor.param_count(),
            });
        }
        let mut sq = 0.0;
        for ((g, w), a) in grad.flat.iter_mut().zip(&params.flat).zip(&p.anchor.flat) {
            let d = w - a;
            sq += d * d;
            *g += p.mu * d;
        }
        parts.prox = 0.5 * p.mu * sq;
    }
    Ok(BatchEval { loss: parts.total(), parts, grad })
}

/// Loss of the mean item loss plus optional proximal term (no gradient);
/// the forward-only side of [`backward`], used by the finite-difference
/// oracle.
pub fn batch_loss(
    params: &ModelParams,
    items: &[BatchItem<'_>],
    prox: Option<ProxTerm<'_>>,
) -> NnResult<f64> {
    if items.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut ws = Workspace::for_arch(&params.arch);
    let scale = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    for item in items {
        for term in &item.terms {
            match term {
                LossTerm::CrossEntropy { input, label } => {
                    let p = forward_with(params, input, &mut ws)?;
                    loss += scale * cross_entropy(&p, *label)?;
                }
                LossTerm::KlToTarget { input, target, weight } => {
                    let p = forward_with(params, input, &mut ws)?;
                    loss += scale * weight * kl_divergence(&p, target)?;
                }
                LossTerm::KlFromTarget { input, target, weight } => {
                    let p = forward_with(params, input, &mut ws)?;
                    loss += scale * weight * kl_divergence(target, &p)?;
                }
            }
        }
    }
    if let Some(p) = prox {
        let mut sq = 0.0;
        for (w, a) in params.flat.iter().zip(&p.anchor.flat) {
            let d = w - a;
            sq += d * d;
        }
        loss += 0.5 * p.mu * sq;
    }
    Ok(loss)
}

/// Plain SGD: `params -= lr * grad`, rejecting non-finite gradients.
pub fn sgd_step(params: &mut ModelParams, grad: &Gradient, lr: f64) -> NnResult<()> {
    prox_sgd_step(params, grad, lr, None)
}

/// SGD step with an optional proximal anchor.
///
/// Without an anchor this is `params -= lr * grad`. With `(anchor, mu)` the
/// proximal term is handled implicitly,
/// `w' = (w - lr*grad + lr*mu*anchor) / (1 + lr*mu)`,
/// which is stable for arbitrarily large `mu` (w' -> anchor) and reduces to
/// the plain step at `mu = 0`.
pub fn prox_sgd_step(
    params: &mut ModelParams,
    grad: &Gradient,
    lr: f64,
    prox: Option<ProxTerm<'_>>,
) -> NnResult<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(NnError::InvalidLearningRate(lr));
    }
    if grad.flat.len() != params.flat.len() {
        return Err(NnError::DimensionMismatch {
            what: "gradient",
            expected: params.flat.len(),
            got: grad.flat.len(),
        });
    }
    if let Some(i) = grad.non_finite_index() {
        return Err(NnError::NonFiniteGradient { index: i });
    }
    match prox {
        None => {
            for (w, g) in params.flat.iter_mut().zip(&grad.flat) {
                *w -= lr * g;
            }
        }
        Some(p) if p.mu == 0.0 => {
            for (w, g) in params.flat.iter_mut().zip(&grad.flat) {
                *w -= lr * g;
            }
        }
        Some(p) => {
            let denom = 1.0 + lr * p.mu;
            for ((w, g), a) in params.flat.iter_mut().zip(&grad.flat).zip(&p.anchor.flat) {
                *w = (*w - lr * g + lr * p.mu * a) / denom;
            }
        }
    }
    Ok(())
}

/// Compares [`backward`] against central finite differences on a
/// deterministic subsample of at least 64 coordinates (all of them for small
/// models) and returns the maximum relative error,
/// `|fd - an| / max(|fd| + |an|, FD_FLOOR)`.
pub fn finite_diff_check(
    params: &ModelParams,
    items: &[BatchItem<'_>],
    prox: Option<ProxTerm<'_>>,
) -> NnResult<f64> {
    let analytic = backward(params, items, prox)?;
    let q = params.param_count();
    let k = q.min(64);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for m in 0..k {
        let idx = m * q / k;
        let orig = probe.flat[idx];
        probe.flat[idx] = orig + FD_STEP;
        let up = batch_loss(&probe, items, prox)?;
        probe.flat[idx] = orig - FD_STEP;
        let down = batch_loss(&probe, items, prox)?;
        probe.flat[idx] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let an = analytic.grad.flat[idx];
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, stream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn arch(sizes: &[usize]) -> Architecture {
        Architecture::new(sizes.to_vec()).unwrap()
    }

    fn label(i: u32) -> ClassLabel {
        ClassLabel::new(i).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = ModelParams::zeros(arch(&[3, 4, 5]));
        let p = forward(&m, &[0.3, -1.0, 2.0]).unwrap();
        for &v in p.as_slice() {
            assert_relative_eq!(v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_half() {
        let mut z = [0.0, 0.0];
        softmax_in_place(&mut z);
        assert_eq!(z, [0.5, 0.5]);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        // Independent oracle: the same matrix chain written out longhand.
        let a = arch(&[3, 2, 2]);
        let m = ModelParams::init(a.clone(), &mut stream(42, &[rng::INIT]));
        let f = m.flatten();
        // layer 0: w (2x3) rows, bias (2)
        let h0 = libm::tanh(f[6] + f[0] * 1.0 + f[1] * 0.0 + f[2] * 0.0);
        let h1 = libm::tanh(f[7] + f[3] * 1.0 + f[4] * 0.0 + f[5] * 0.0);
        // layer 1: w (2x2), bias (2)
        let z0 = f[12] + f[8] * h0 + f[9] * h1;
        let z1 = f[13] + f[10] * h0 + f[11] * h1;
        let e0 = libm::exp(z0 - z0.max(z1));
        let e1 = libm::exp(z1 - z0.max(z1));
        let expect = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let got = forward(&m, &[1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(got.as_slice()[0], expect[0], epsilon = 1e-15);
        assert_relative_eq!(got.as_slice()[1], expect[1], epsilon = 1e-15);
    }

    #[test]
    fn forward_rejects_bad_input_width() {
        let m = ModelParams::zeros(arch(&[3, 2]));
        assert!(matches!(
            forward(&m, &[1.0, 2.0]),
            Err(NnError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&one_hot, label(2)).unwrap(), 0.0);

        let uniform = ProbVector::uniform(10);
        assert_relative_eq!(
            cross_entropy(&uniform, label(4)).unwrap(),
            libm::log(10.0),
            epsilon = 1e-12
        );

        let p = ProbVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        assert_relative_eq!(cross_entropy(&p, label(1)).unwrap(), 0.356_674_943_938_732_3, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = ProbVector::new(vec![0.0, 1.0]).unwrap();
        let ce = cross_entropy(&p, label(1)).unwrap();
        assert!(ce.is_finite());
        assert_relative_eq!(ce, -libm::log(LOG_EPS), epsilon = 1e-9);
    }

    #[test]
    fn kl_examples() {
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);

        let point = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert_relative_eq!(
            kl_divergence(&point, &half).unwrap(),
            libm::log(2.0),
            epsilon = 1e-12
        );

        let p = ProbVector::new(vec![0.3, 0.7]).unwrap();
        let q = ProbVector::new(vec![0.6, 0.4]).unwrap();
        assert!(matches!(
            kl_divergence(&p, &ProbVector::uniform(3)),
            Err(NnError::DimensionMismatch { .. })
        ));
        assert!(kl_divergence(&p, &q).unwrap() > 0.0);
    }

    #[test]
    fn sgd_step_examples() {
        let a = arch(&[1, 1]);
        let mut m = ModelParams::from_flat(a.clone(), vec![1.0, 0.0]).unwrap();
        let g = Gradient { flat: vec![2.0, 0.0] };
        sgd_step(&mut m, &g, 0.1).unwrap();
        assert_eq!(m.as_flat()[0], 0.8);

        // lr = 0 and grad = 0 are identities, bit for bit.
        let before = m.clone();
        sgd_step(&mut m, &g, 0.0).unwrap();
        assert_eq!(m, before);
        let zero = Gradient::zeros_like(&m);
        sgd_step(&mut m, &zero, 0.5).unwrap();
        assert_eq!(m, before);

        let bad = Gradient { flat: vec![f64::NAN, 0.0] };
        assert!(matches!(
            sgd_step(&mut m, &bad, 0.1),
            Err(NnError::NonFiniteGradient { index: 0 })
        ));
        assert!(matches!(
            sgd_step(&mut m, &zero, -1.0),
            Err(NnError::InvalidLearningRate(_))
        ));
    }

    #[test]
    fn prox_step_anchors_for_huge_mu() {
        let a = arch(&[2, 2]);
        let anchor = ModelParams::init(a.clone(), &mut stream(3, &[rng::INIT]));
        let g = Gradient { flat: vec![1.0; anchor.param_count()] };

        let mut plain = anchor.clone();
        prox_sgd_step(&mut plain, &g, 0.05, Some(ProxTerm { anchor: &anchor, mu: 0.0 })).unwrap();
        let free_norm = plain.delta_from(&anchor).unwrap().norm();

        let mut anchored = anchor.clone();
        prox_sgd_step(&mut anchored, &g, 0.05, Some(ProxTerm { anchor: &anchor, mu: 1e6 })).unwrap();
        let anchored_norm = anchored.delta_from(&anchor).unwrap().norm();

        assert!(anchored_norm < 1e-3 * free_norm, "{anchored_norm} vs {free_norm}");
    }

    #[test]
    fn backward_zero_at_stationary_point() {
        // Saturated logits: prediction is numerically one-hot at the label.
        let a = arch(&[2, 2]);
        let m = ModelParams::from_flat(a, vec![0.0, 0.0, 0.0, 0.0, 60.0, -60.0]).unwrap();
        let items = [BatchItem::cross_entropy(&[0.3, -0.4][..], label(1))];
        let ev = backward(&m, &items, None).unwrap();
        assert!(ev.loss < 1e-8);
        for &g in ev.grad.as_flat() {
            assert!(g.abs() < 1e-8);
        }
    }

    #[test]
    fn kl_gradient_zero_when_target_equals_prediction() {
        let a = arch(&[2, 3]);
        let m = ModelParams::init(a, &mut stream(5, &[rng::INIT]));
        let x = [0.4, -0.2];
        let pred = forward(&m, &x).unwrap();
        let items = [BatchItem {
            terms: vec![LossTerm::KlToTarget { input: Cow::Borrowed(&x[..]), target: pred, weight: 1.0 }],
        }];
        let ev = backward(&m, &items, None).unwrap();
        assert!(ev.loss.abs() < 1e-12);
        for &g in ev.grad.as_flat() {
            assert!(g.abs() < 1e-10);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = ModelParams::zeros(arch(&[2, 2]));
        assert!(matches!(backward(&m, &[], None), Err(NnError::EmptyBatch)));
    }

    fn random_items(
        rng: &mut rand_chacha::ChaCha8Rng,
        dim: usize,
        classes: usize,
        n: usize,
        with_kl: bool,
    ) -> Vec<BatchItem<'static>> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..dim).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
                let y = label(rng.random_range(1..=classes as u32));
                let mut item = BatchItem::cross_entropy(x.clone(), y);
                if with_kl {
                    let mut t: Vec<f64> = (0..classes).map(|_| rng.random::<f64>() + 0.05).collect();
                    let s: f64 = t.iter().sum();
                    t.iter_mut().for_each(|v| *v /= s);
                    item.terms.push(LossTerm::KlToTarget {
                        input: Cow::Owned(x),
                        target: ProbVector::new(t).unwrap(),
                        weight: 0.7,
                    });
                }
                item
            })
            .collect()
    }

    #[test]
    fn finite_diff_multi_seed_all_loss_specs() {
        for seed in 0..20u64 {
            let mut r = stream(seed, &[rng::DIAGNOSTIC, 1]);
            let a = arch(&[5, 7, 4]);
            let m = ModelParams::init(a.clone(), &mut r);
            let anchor = ModelParams::init(a, &mut r);

            let ce_items = random_items(&mut r, 5, 4, 3, false);
            assert!(finite_diff_check(&m, &ce_items, None).unwrap() <= 1e-4);

            let kl_items = random_items(&mut r, 5, 4, 3, true);
            assert!(finite_diff_check(&m, &kl_items, None).unwrap() <= 1e-4);

            let prox = ProxTerm { anchor: &anchor, mu: 0.1 };
            assert!(finite_diff_check(&m, &ce_items, Some(prox)).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn finite_diff_linear_model_is_tighter() {
        let mut r = stream(9, &[rng::DIAGNOSTIC, 2]);
        let a = arch(&[6, 3]);
        let m = ModelParams::init(a, &mut r);
        let items = random_items(&mut r, 6, 3, 4, false);
        assert!(finite_diff_check(&m, &items, None).unwrap() <= 1e-5);
    }

    #[test]
    fn finite_diff_handles_zero_inputs() {
        let a = arch(&[4, 3, 2]);
        let m = ModelParams::init(a, &mut stream(11, &[rng::DIAGNOSTIC, 3]));
        let items = [BatchItem::cross_entropy(vec![0.0; 4], label(1))];
        let err = finite_diff_check(&m, &items, None).unwrap();
        assert!(err.is_finite());
        assert!(err <= 1e-4);
    }

    #[test]
    fn uda_direction_gradient_checks_too() {
        let mut r = stream(13, &[rng::DIAGNOSTIC, 4]);
        let a = arch(&[4, 6, 3]);
        let m = ModelParams::init(a, &mut r);
        let items: Vec<BatchItem<'static>> = (0..3)
            .map(|_| {
                let x: Vec<f64> = (0..4).map(|_| r.random::<f64>()).collect();
                let mut t: Vec<f64> = (0..3).map(|_| r.random::<f64>() + 0.1).collect();
                let s: f64 = t.iter().sum();
                t.iter_mut().for_each(|v| *v /= s);
                BatchItem {
                    terms: vec![LossTerm::KlFromTarget {
                        input: Cow::Owned(x),
                        target: ProbVector::new(t).unwrap(),
                        weight: 1.0,
                    }],
                }
            })
            .collect();
        assert!(finite_diff_check(&m, &items, None).unwrap() <= 1e-4);
    }

    #[test]
    fn flatten_unflatten_roundtrip_is_exact() {
        let a = arch(&[7, 5, 3]);
        let m = ModelParams::init(a.clone(), &mut stream(21, &[rng::INIT]));
        let rt = ModelParams::from_flat(a, m.flatten()).unwrap();
        assert_eq!(m, rt);
        for (x, y) in m.as_flat().iter().zip(rt.as_flat()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    proptest! {
        #[test]
        fn softmax_is_valid_prob_vector(logits in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let mut z = logits;
            softmax_in_place(&mut z);
            prop_assert!(ProbVector::new(z).is_ok());
        }

        #[test]
        fn kl_is_nonnegative_and_zero_iff_equal(
            pa in proptest::collection::vec(0.01f64..1.0, 4),
            qa in proptest::collection::vec(0.01f64..1.0, 4),
        ) {
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum();
                ProbVector::new(v.iter().map(|x| x / s).collect()).unwrap()
            };
            let p = norm(&pa);
            let q = norm(&qa);
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn flatten_roundtrip_random(seed in 0u64..500) {
            let a = Architecture::new(alloc::vec![3, 4, 2]).unwrap();
            let m = ModelParams::init(a.clone(), &mut stream(seed, &[rng::INIT]));
            let rt = ModelParams::from_flat(a, m.flatten()).unwrap();
            prop_assert_eq!(m, rt);
        }
    }
}
