//! Round-based protocol: client sampling, the two-phase local update
//! (supervised, then semi-supervised on pseudo-labeled data), baseline
//! self-training variants, and sample-count-weighted aggregation.
//!
//! Every client derives its own random streams from
//! `(seed, phase, round, client)`, so clients are independent: processing
//! order (or parallel execution) cannot change any result, and aggregation
//! reduces in ascending client order regardless of scheduling.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{augment_strong, augment_weak, mismatch_score, ClientDataset, FeatureShape, Sample};
use crate::nn::{
    self, Architecture, BatchItem, ClassLabel, LossTerm, ModelParams, NnError, ParamDelta,
    ProxTerm, Workspace,
};
use crate::rng::{self, stream};
use crate::ssl::{self, LogitPair, ModelSide, PseudoLabelDecision};

pub type FedResult<T> = Result<T, FedError>;

#[derive(Debug, Error, PartialEq)]
pub enum FedError {
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error("no clients")]
    NoClients,
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("round {round}: non-finite model parameter at flat index {index} after aggregation")]
    NonFiniteModel { round: u64, index: usize },
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: u64,
        client: usize,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl FedError {
    /// True for aborts caused by non-finite numerics (as opposed to bad
    /// configuration or shape mismatches).
    pub fn is_numeric(&self) -> bool {
        let nn_numeric = |e: &NnError| {
            matches!(e, NnError::NonFiniteGradient { .. } | NnError::NonFiniteParams { .. })
        };
        match self {
            FedError::NonFiniteModel { .. } => true,
            FedError::Client { source, .. } => nn_numeric(source),
            FedError::Nn(source) => nn_numeric(source),
            _ => false,
        }
    }
}

/// Training method for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FedAvgSup,
    FedProxSup,
    FedAvgFixMatch,
    FedAvgUda,
    FedProxFixMatch,
    FedProxUda,
    FedLabel,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FedAvgSup,
        Method::FedProxSup,
        Method::FedAvgFixMatch,
        Method::FedAvgUda,
        Method::FedProxFixMatch,
        Method::FedProxUda,
        Method::FedLabel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::FedAvgSup => "fedavg-sup",
            Method::FedProxSup => "fedprox-sup",
            Method::FedAvgFixMatch => "fedavg-fixmatch",
            Method::FedAvgUda => "fedavg-uda",
            Method::FedProxFixMatch => "fedprox-fixmatch",
            Method::FedProxUda => "fedprox-uda",
            Method::FedLabel => "fedlabel",
        }
    }

    pub fn parse(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Adds the proximal anchor term to every local step.
    pub fn is_prox(&self) -> bool {
        matches!(self, Method::FedProxSup | Method::FedProxFixMatch | Method::FedProxUda)
    }

    /// Runs the second (unlabeled) phase.
    pub fn is_semi_supervised(&self) -> bool {
        !matches!(self, Method::FedAvgSup | Method::FedProxSup)
    }
}

/// Hyperparameters of the local update procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub ssl: ssl::SslConfig,
    /// Supervised local steps per round.
    pub tau: u32,
    /// Semi-supervised local steps per round.
    pub tau_prime: u32,
    pub lr: f64,
    pub batch_size: usize,
    /// Proximal coefficient; > 0 exactly for the FedProx variants.
    pub prox_mu: f64,
    /// Apply the strong view to the pseudo-label CE input.
    pub strong_augment: bool,
    pub aug_ops: u32,
    pub aug_magnitude: f64,
    /// Sharpening temperature of the UDA target.
    pub uda_temperature: f64,
}

impl MethodConfig {
    pub fn validate(&self) -> FedResult<()> {
        self.ssl.validate().map_err(FedError::InvalidConfig)?;
        if self.tau < 1 {
            return Err(FedError::InvalidConfig("tau must be >= 1"));
        }
        if self.method.is_semi_supervised() && self.tau_prime < 1 {
            return Err(FedError::InvalidConfig("tau_prime must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(FedError::InvalidConfig("batch_size must be >= 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(FedError::InvalidConfig("lr must be finite and >= 0"));
        }
        if self.method.is_prox() {
            if !(self.prox_mu > 0.0) {
                return Err(FedError::InvalidConfig("prox_mu must be > 0 for FedProx variants"));
            }
        } else if self.prox_mu != 0.0 {
            return Err(FedError::InvalidConfig("prox_mu must be 0 for non-FedProx methods"));
        }
        if !(0.0..=30.0).contains(&self.aug_magnitude) {
            return Err(FedError::InvalidConfig("aug_magnitude must be in [0, 30]"));
        }
        if !(self.uda_temperature > 0.0) {
            return Err(FedError::InvalidConfig("uda_temperature must be > 0"));
        }
        Ok(())
    }

    fn prox_term<'a>(&self, anchor: &'a ModelParams) -> Option<ProxTerm<'a>> {
        self.method.is_prox().then(|| ProxTerm { anchor, mu: self.prox_mu })
    }
}

/// Run-level options independent of the training method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub rounds: u64,
    /// Fraction of clients sampled per round, in (0, 1].
    pub participation: f64,
    pub seed: u64,
    /// Evaluate every this many rounds (carry the last value in between).
    pub eval_every: u64,
    /// Collect per-sample decision records into the metrics.
    pub collect_decisions: bool,
    pub shape: FeatureShape,
}

impl RunOptions {
    pub fn validate(&self) -> FedResult<()> {
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(FedError::InvalidConfig("participation must be in (0, 1]"));
        }
        if self.eval_every == 0 {
            return Err(FedError::InvalidConfig("eval_every must be >= 1"));
        }
        Ok(())
    }
}

/// Server-side state between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    pub round: u64,
    pub seed: u64,
}

impl ServerState {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let global = ModelParams::init(arch, &mut stream(seed, &[rng::INIT]));
        Self { global, round: 0, seed }
    }
}

/// What one client sends back for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    /// Combined supervised + semi-supervised delta.
    pub delta: ParamDelta,
    /// Aggregation weight: labeled count + accepted unlabeled count.
    pub weight: u64,
    pub stats: ClientRoundStats,
    pub decisions: Vec<DecisionRecord>,
}

/// Per-client counters of one round.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClientRoundStats {
    pub labeled_count: u64,
    pub unlabeled_count: u64,
    pub accepted: u64,
    pub correct_pseudo: u64,
    pub lambda_sum: f64,
    pub sup_loss_sum: f64,
    pub sup_steps: u64,
    pub unsup_ce_sum: f64,
    pub unsup_kl_sum: f64,
    pub unsup_steps: u64,
}

/// One row of the decision audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub client: usize,
    /// Index into the client's unlabeled set.
    pub sample: usize,
    pub selected: ModelSide,
    pub global_conf: f64,
    pub local_conf: f64,
    /// 0 encodes a discarded sample.
    pub pseudo_label: u32,
    /// Quarantined ground truth (evaluation only).
    pub true_label: u32,
    pub kl_active: bool,
    pub lambda: f64,
}

/// Aggregated per-round record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u64,
    /// Top-1 accuracy of the post-aggregation global model (carried forward
    /// between evaluation rounds).
    pub test_accuracy: f64,
    /// Mean labeled/unlabeled mismatch over participants with both subsets.
    pub mean_mismatch: f64,
    /// Accepted unlabeled samples / unlabeled samples over participants.
    pub accepted_frac: f64,
    /// Accepted pseudo-labels matching the quarantined truth.
    pub pseudo_accuracy: f64,
    /// Mean consistency weight over accepted samples.
    pub mean_lambda: f64,
    /// Mean supervised batch CE per step.
    pub sup_loss: f64,
    /// Mean semi-supervised CE part per step.
    pub unsup_ce: f64,
    /// Mean semi-supervised (weighted) KL part per step.
    pub unsup_kl: f64,
    /// True when every participant reported weight 0 (global unchanged).
    pub zero_weight: bool,
    pub per_client: Vec<ClientRoundSummary>,
    pub decisions: Vec<DecisionRecord>,
}

/// Weight audit entry: `weight == labeled + accepted` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientRoundSummary {
    pub client: usize,
    pub labeled: u64,
    pub accepted: u64,
    pub weight: u64,
}

/// `ceil(fraction * m)` distinct client indices, uniform without
/// replacement, returned sorted. Fraction 1 selects everyone.
pub fn sample_clients(seed: u64, round: u64, client_count: usize, fraction: f64) -> Vec<usize> {
    let m = client_count;
    let count = libm::ceil(fraction * m as f64).max(1.0) as usize;
    let count = count.min(m);
    let mut idx: Vec<usize> = (0..m).collect();
    let mut r = stream(seed, &[rng::CLIENT_SAMPLE, round]);
    for i in 0..count {
        let j = r.random_range(i..m);
        idx.swap(i, j);
    }
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// `min(b, n)` distinct indices in ascending order; the full index range
/// when the pool is not larger than the batch.
fn sample_batch(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    let k = b.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Supervised phase: tau mini-batch CE steps on the labeled set starting
/// from the global model (with the proximal anchor for FedProx variants).
/// Returns the trained local model, its delta, and (loss sum, step count).
/// An empty labeled set skips all steps and returns a zero delta.
pub fn supervised_local_update(
    global: &ModelParams,
    client: &ClientDataset,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> FedResult<(ModelParams, ParamDelta, (f64, u64))> {
    let mut w = global.clone();
    let mut loss_sum = 0.0;
    let mut steps = 0u64;
    if !client.labeled.is_empty() {
        let prox = cfg.prox_term(global);
        for _ in 0..cfg.tau {
            let batch = sample_batch(rng, client.labeled.len(), cfg.batch_size);
            let items: Vec<BatchItem<'_>> = batch
                .iter()
                .map(|&i| {
                    let s = &client.labeled[i];
                    BatchItem::cross_entropy(s.features.as_slice(), s.label)
                })
                .collect();
            let ev = nn::backward(&w, &items, None)?;
            nn::prox_sgd_step(&mut w, &ev.grad, cfg.lr, prox)?;
            loss_sum += ev.parts.ce;
            steps += 1;
        }
    }
    let delta = w.delta_from(global)?;
    Ok((w, delta, (loss_sum, steps)))
}

struct UnsupPhase {
    delta: ParamDelta,
    accepted: u64,
    correct: u64,
    lambda_sum: f64,
    ce_sum: f64,
    kl_sum: f64,
    steps: u64,
    decisions: Vec<DecisionRecord>,
}

/// Semi-supervised phase: decisions are frozen from the (global, local)
/// pair over the whole unlabeled set, then tau_prime SGD steps minimize the
/// pseudo-label CE + weighted consistency KL over the accepted subset,
/// starting again from the global model. Zero accepted samples give a zero
/// delta.
pub fn semi_supervised_local_update(
    global: &ModelParams,
    w_local: &ModelParams,
    client: &ClientDataset,
    cfg: &MethodConfig,
    shape: FeatureShape,
    client_id: usize,
    rng_unsup: &mut ChaCha8Rng,
    collect: bool,
) -> FedResult<(ParamDelta, u64, ClientRoundStats, Vec<DecisionRecord>)> {
    let mut ws = Workspace::for_arch(global.arch());
    let mut decisions: Vec<PseudoLabelDecision> = Vec::with_capacity(client.unlabeled.len());
    for u in &client.unlabeled {
        let gp = nn::forward_with(global, &u.features, &mut ws)?;
        let lp = nn::forward_with(w_local, &u.features, &mut ws)?;
        let pair = LogitPair::new(gp, lp, cfg.ssl.confidence_metric);
        decisions.push(ssl::decide(pair, &cfg.ssl));
    }

    let mut records = Vec::new();
    if collect {
        for (i, (d, u)) in decisions.iter().zip(&client.unlabeled).enumerate() {
            records.push(DecisionRecord {
                client: client_id,
                sample: i,
                selected: d.selected,
                global_conf: match d.selected {
                    ModelSide::Global => cfg.ssl.confidence_metric.score(&d.s_star),
                    ModelSide::Local => cfg.ssl.confidence_metric.score(&d.s_minus_star),
                },
                local_conf: match d.selected {
                    ModelSide::Global => cfg.ssl.confidence_metric.score(&d.s_minus_star),
                    ModelSide::Local => cfg.ssl.confidence_metric.score(&d.s_star),
                },
                pseudo_label: d.label.class().map_or(0, ClassLabel::get),
                true_label: u.eval_only_label().get(),
                kl_active: d.kl_active,
                lambda: d.lambda,
            });
        }
    }

    let accepted_idx: Vec<usize> =
        (0..decisions.len()).filter(|&i| decisions[i].label.class().is_some()).collect();
    let mut phase = UnsupPhase {
        delta: ParamDelta::zeros(global.param_count()),
        accepted: accepted_idx.len() as u64,
        correct: 0,
        lambda_sum: 0.0,
        ce_sum: 0.0,
        kl_sum: 0.0,
        steps: 0,
        decisions: records,
    };
    for &i in &accepted_idx {
        let d = &decisions[i];
        phase.lambda_sum += d.lambda;
        if d.label.class() == Some(client.unlabeled[i].eval_only_label()) {
            phase.correct += 1;
        }
    }

    if !accepted_idx.is_empty() {
        let mut w = global.clone();
        for _ in 0..cfg.tau_prime {
            let picks = sample_batch(rng_unsup, accepted_idx.len(), cfg.batch_size);
            let batch: Vec<(&[f64], &PseudoLabelDecision)> = picks
                .iter()
                .map(|&p| {
                    let i = accepted_idx[p];
                    (client.unlabeled[i].features.as_slice(), &decisions[i])
                })
                .collect();
            let ev = ssl::semi_supervised_batch_loss(&w, &batch, |f| {
                if cfg.strong_augment {
                    augment_strong(f, shape, cfg.aug_ops, cfg.aug_magnitude, rng_unsup)
                } else {
                    f.to_vec()
                }
            })?;
            nn::sgd_step(&mut w, &ev.grad, cfg.lr)?;
            phase.ce_sum += ev.ce;
            phase.kl_sum += ev.kl;
            phase.steps += 1;
        }
        phase.delta = w.delta_from(global)?;
    }

    let stats = ClientRoundStats {
        labeled_count: 0,
        unlabeled_count: client.unlabeled.len() as u64,
        accepted: phase.accepted,
        correct_pseudo: phase.correct,
        lambda_sum: phase.lambda_sum,
        sup_loss_sum: 0.0,
        sup_steps: 0,
        unsup_ce_sum: phase.ce_sum,
        unsup_kl_sum: phase.kl_sum,
        unsup_steps: phase.steps,
    };
    Ok((phase.delta, phase.accepted, stats, phase.decisions))
}

/// Single-model self-training phase of the FixMatch / UDA baselines: the
/// trained local model pseudo-labels a weak view of each unlabeled sample,
/// masked at beta; accepted samples then drive tau_prime steps of CE on the
/// strong view (FixMatch) or KL from the sharpened weak prediction to the
/// strong-view prediction (UDA).
pub fn baseline_unsup_update(
    global: &ModelParams,
    w_local: &ModelParams,
    client: &ClientDataset,
    cfg: &MethodConfig,
    shape: FeatureShape,
    rng_decide: &mut ChaCha8Rng,
    rng_unsup: &mut ChaCha8Rng,
) -> FedResult<(ParamDelta, u64, ClientRoundStats)> {
    let is_uda = matches!(cfg.method, Method::FedAvgUda | Method::FedProxUda);
    let mut ws = Workspace::for_arch(global.arch());

    struct Accepted {
        sample: usize,
        label: ClassLabel,
        target: Option<nn::ProbVector>, // UDA soft target
    }
    let mut accepted: Vec<Accepted> = Vec::new();
    for (i, u) in client.unlabeled.iter().enumerate() {
        let weak = augment_weak(&u.features, shape, rng_decide);
        let p = nn::forward_with(w_local, &weak, &mut ws)?;
        if p.max() > cfg.ssl.beta {
            let label = p.argmax_label();
            let target = is_uda.then(|| ssl::sharpen(&p, cfg.uda_temperature));
            accepted.push(Accepted { sample: i, label, target });
        }
    }

    let mut stats = ClientRoundStats {
        unlabeled_count: client.unlabeled.len() as u64,
        accepted: accepted.len() as u64,
        ..ClientRoundStats::default()
    };
    for a in &accepted {
        if a.label == client.unlabeled[a.sample].eval_only_label() {
            stats.correct_pseudo += 1;
        }
    }

    let mut delta = ParamDelta::zeros(global.param_count());
    if !accepted.is_empty() {
        let prox = cfg.prox_term(global);
        let mut w = global.clone();
        for _ in 0..cfg.tau_prime {
            let picks = sample_batch(rng_unsup, accepted.len(), cfg.batch_size);
            let items: Vec<BatchItem<'_>> = picks
                .iter()
                .map(|&p| {
                    let a = &accepted[p];
                    let features = client.unlabeled[a.sample].features.as_slice();
                    let strong = if cfg.strong_augment {
                        augment_strong(features, shape, cfg.aug_ops, cfg.aug_magnitude, rng_unsup)
                    } else {
                        features.to_vec()
                    };
                    match &a.target {
                        Some(t) => BatchItem {
                            terms: vec![LossTerm::KlFromTarget {
                                input: strong.into(),
                                target: t.clone(),
                                weight: 1.0,
                            }],
                        },
                        None => BatchItem::cross_entropy(strong, a.label),
                    }
                })
                .collect();
            let ev = nn::backward(&w, &items, None)?;
            nn::prox_sgd_step(&mut w, &ev.grad, cfg.lr, prox)?;
            stats.unsup_ce_sum += ev.parts.ce;
            stats.unsup_kl_sum += ev.parts.kl;
            stats.unsup_steps += 1;
        }
        delta = w.delta_from(global)?;
    }
    Ok((delta, stats.accepted, stats))
}

/// Runs both local phases for one client and packages the combined update.
pub fn client_update(
    global: &ModelParams,
    client_id: usize,
    client: &ClientDataset,
    cfg: &MethodConfig,
    opts: &RunOptions,
    round: u64,
) -> FedResult<ClientUpdate> {
    let wrap = |source: FedError| match source {
        FedError::Nn(source) => FedError::Client { round, client: client_id, source },
        other => other,
    };

    let mut sup_rng = stream(opts.seed, &[rng::SUPERVISED, round, client_id as u64]);
    let (w_local, sup_delta, (sup_loss_sum, sup_steps)) =
        supervised_local_update(global, client, cfg, &mut sup_rng).map_err(wrap)?;
    let labeled = client.labeled.len() as u64;

    let mut stats = ClientRoundStats {
        labeled_count: labeled,
        unlabeled_count: client.unlabeled.len() as u64,
        sup_loss_sum,
        sup_steps,
        ..ClientRoundStats::default()
    };
    let mut delta = sup_delta;
    let mut decisions = Vec::new();
    let mut accepted = 0;

    if cfg.method.is_semi_supervised() {
        let mut unsup_rng = stream(opts.seed, &[rng::UNSUPERVISED, round, client_id as u64]);
        let (unsup_delta, acc, unsup_stats, recs) = if cfg.method == Method::FedLabel {
            semi_supervised_local_update(
                global,
                &w_local,
                client,
                cfg,
                opts.shape,
                client_id,
                &mut unsup_rng,
                opts.collect_decisions,
            )
            .map_err(wrap)?
        } else {
            let mut decide_rng = stream(opts.seed, &[rng::DECIDE, round, client_id as u64]);
            let (d, a, s) = baseline_unsup_update(
                global,
                &w_local,
                client,
                cfg,
                opts.shape,
                &mut decide_rng,
                &mut unsup_rng,
            )
            .map_err(wrap)?;
            (d, a, s, Vec::new())
        };
        delta.add(&unsup_delta).map_err(|e| wrap(e.into()))?;
        accepted = acc;
        stats.accepted = unsup_stats.accepted;
        stats.correct_pseudo = unsup_stats.correct_pseudo;
        stats.lambda_sum = unsup_stats.lambda_sum;
        stats.unsup_ce_sum = unsup_stats.unsup_ce_sum;
        stats.unsup_kl_sum = unsup_stats.unsup_kl_sum;
        stats.unsup_steps = unsup_stats.unsup_steps;
        decisions = recs;
    }

    // r_k counts each data point once: labeled + accepted unlabeled.
    let weight = labeled + accepted;
    Ok(ClientUpdate { client: client_id, delta, weight, stats, decisions })
}

/// Adds the r-weighted mean of the deltas to the global model, reducing in
/// ascending client order no matter how `updates` is ordered. Returns true
/// (and leaves the model unchanged) when all weights are zero.
pub fn aggregate(global: &mut ModelParams, updates: &[ClientUpdate]) -> FedResult<bool> {
    let total: u64 = updates.iter().map(|u| u.weight).sum();
    if total == 0 {
        return Ok(true);
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client);
    let mut acc = ParamDelta::zeros(global.param_count());
    for u in order {
        if u.delta.len() != global.param_count() {
            return Err(NnError::DimensionMismatch {
                what: "client delta",
                expected: global.param_count(),
                got: u.delta.len(),
            }
            .into());
        }
        let f = u.weight as f64 / total as f64;
        for (a, d) in acc.as_mut_slice().iter_mut().zip(u.delta.as_slice()) {
            *a += f * d;
        }
    }
    global.add_scaled_delta(1.0, &acc)?;
    Ok(false)
}

/// Top-1 accuracy on a labeled evaluation set.
pub fn evaluate(params: &ModelParams, test_set: &[Sample]) -> FedResult<f64> {
    if test_set.is_empty() {
        return Err(FedError::EmptyEvalSet);
    }
    let mut ws = Workspace::for_arch(params.arch());
    let mut correct = 0usize;
    for s in test_set {
        let p = nn::forward_with(params, &s.features, &mut ws)?;
        if p.argmax_label() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

/// Executes one round over the given participants (processed in the order
/// given — the result cannot depend on it) and advances the server state.
/// `test_accuracy` is left NaN for [`run_training`] to fill.
pub fn run_round(
    server: &mut ServerState,
    clients: &[ClientDataset],
    participants: &[usize],
    cfg: &MethodConfig,
    opts: &RunOptions,
) -> FedResult<RoundMetrics> {
    let round = server.round;
    let mut updates = Vec::with_capacity(participants.len());
    for &k in participants {
        updates.push(client_update(&server.global, k, &clients[k], cfg, opts, round)?);
    }
    let zero_weight = aggregate(&mut server.global, &updates)?;
    if let Some(index) = server.global.non_finite_index() {
        return Err(FedError::NonFiniteModel { round, index });
    }
    server.round += 1;

    let mut sum = ClientRoundStats::default();
    let mut per_client = Vec::with_capacity(updates.len());
    let mut decisions = Vec::new();
    let mut mismatch_sum = 0.0;
    let mut mismatch_n = 0u64;
    for u in &updates {
        let s = &u.stats;
        sum.labeled_count += s.labeled_count;
        sum.unlabeled_count += s.unlabeled_count;
        sum.accepted += s.accepted;
        sum.correct_pseudo += s.correct_pseudo;
        sum.lambda_sum += s.lambda_sum;
        sum.sup_loss_sum += s.sup_loss_sum;
        sum.sup_steps += s.sup_steps;
        sum.unsup_ce_sum += s.unsup_ce_sum;
        sum.unsup_kl_sum += s.unsup_kl_sum;
        sum.unsup_steps += s.unsup_steps;
        per_client.push(ClientRoundSummary {
            client: u.client,
            labeled: s.labeled_count,
            accepted: s.accepted,
            weight: u.weight,
        });
        if let Ok(m) = mismatch_score(&clients[u.client]) {
            mismatch_sum += m;
            mismatch_n += 1;
        }
    }
    per_client.sort_by_key(|c| c.client);
    for u in updates {
        decisions.extend(u.decisions);
    }
    decisions.sort_by_key(|d| (d.client, d.sample));

    let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
    Ok(RoundMetrics {
        round,
        test_accuracy: f64::NAN,
        mean_mismatch: ratio(mismatch_sum, mismatch_n),
        accepted_frac: ratio(sum.accepted as f64, sum.unlabeled_count),
        pseudo_accuracy: ratio(sum.correct_pseudo as f64, sum.accepted),
        mean_lambda: ratio(sum.lambda_sum, sum.accepted),
        sup_loss: ratio(sum.sup_loss_sum, sum.sup_steps),
        unsup_ce: ratio(sum.unsup_ce_sum, sum.unsup_steps),
        unsup_kl: ratio(sum.unsup_kl_sum, sum.unsup_steps),
        zero_weight,
        per_client,
        decisions,
    })
}

/// Full training run: per round, sample clients, run both local phases on
/// each, aggregate, and evaluate the global model. Returns the per-round
/// metrics; see [`run_training_with_model`] to also get the final model.
pub fn run_training(
    clients: &[ClientDataset],
    arch: &Architecture,
    cfg: &MethodConfig,
    opts: &RunOptions,
    eval_set: &[Sample],
) -> FedResult<Vec<RoundMetrics>> {
    run_training_with_model(clients, arch, cfg, opts, eval_set).map(|(m, _)| m)
}

/// [`run_training`] plus the final global model.
pub fn run_training_with_model(
    clients: &[ClientDataset],
    arch: &Architecture,
    cfg: &MethodConfig,
    opts: &RunOptions,
    eval_set: &[Sample],
) -> FedResult<(Vec<RoundMetrics>, ModelParams)> {
    cfg.validate()?;
    opts.validate()?;
    if clients.is_empty() {
        return Err(FedError::NoClients);
    }
    if eval_set.is_empty() {
        return Err(FedError::EmptyEvalSet);
    }
    let mut server = ServerState::new(arch.clone(), opts.seed);
    let mut metrics = Vec::with_capacity(opts.rounds as usize);
    let mut last_acc = evaluate(&server.global, eval_set)?;
    for t in 0..opts.rounds {
        let participants = sample_clients(opts.seed, t, clients.len(), opts.participation);
        let mut rm = run_round(&mut server, clients, &participants, cfg, opts)?;
        if (t + 1) % opts.eval_every == 0 || t + 1 == opts.rounds {
            last_acc = evaluate(&server.global, eval_set)?;
        }
        rm.test_accuracy = last_acc;
        metrics.push(rm);
    }
    Ok((metrics, server.global))
}
