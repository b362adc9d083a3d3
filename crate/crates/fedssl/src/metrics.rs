//! Deterministic CSV rendering of run metrics and diagnostics. All floats
//! are written with six decimal places so identical runs produce identical
//! bytes.

use std::fmt::Write as _;
use std::path::Path;

use fedssl_core::data::{mismatch_score, ClientDataset};
use fedssl_core::fed::RoundMetrics;
use fedssl_core::ssl::ModelSide;

use crate::dataset::PreparedData;
use crate::HarnessError;

pub const METRICS_HEADER: &str =
    "round,test_acc,mean_mismatch,accepted_frac,pseudo_acc,mean_lambda,sup_loss,unsup_ce,unsup_kl";

pub const DECISIONS_HEADER: &str =
    "round,client,sample,selected,global_conf,local_conf,pseudo_label,true_label,kl_active,lambda";

pub fn render_metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (metrics.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.round,
            m.test_accuracy,
            m.mean_mismatch,
            m.accepted_frac,
            m.pseudo_accuracy,
            m.mean_lambda,
            m.sup_loss,
            m.unsup_ce,
            m.unsup_kl,
        );
    }
    out
}

pub fn render_decisions_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::new();
    out.push_str(DECISIONS_HEADER);
    out.push('\n');
    for m in metrics {
        for d in &m.decisions {
            let side = match d.selected {
                ModelSide::Global => "global",
                ModelSide::Local => "local",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{},{},{},{:.6}",
                m.round,
                d.client,
                d.sample,
                side,
                d.global_conf,
                d.local_conf,
                d.pseudo_label,
                d.true_label,
                d.kl_active,
                d.lambda,
            );
        }
    }
    out
}

/// One-line run summary appended next to the metrics.
pub fn render_summary(metrics: &[RoundMetrics]) -> String {
    let final_acc = metrics.last().map_or(f64::NAN, |m| m.test_accuracy);
    let best_acc = metrics.iter().map(|m| m.test_accuracy).fold(f64::NAN, f64::max);
    format!(
        "rounds={} final_test_acc={:.6} best_test_acc={:.6}\n",
        metrics.len(),
        final_acc,
        best_acc
    )
}

/// Per-client class histograms of the labeled and (quarantined) unlabeled
/// subsets, with the mismatch score.
pub fn render_partition_report(clients: &[ClientDataset], classes: u32) -> String {
    let mut out = String::from("client,subset,count,mismatch");
    for c in 1..=classes {
        let _ = write!(out, ",class_{c}");
    }
    out.push('\n');
    for (k, client) in clients.iter().enumerate() {
        let mismatch = match mismatch_score(client) {
            Ok(m) => format!("{m:.6}"),
            Err(_) => String::new(),
        };
        let mut labeled = vec![0usize; classes as usize];
        for s in &client.labeled {
            labeled[s.label.index()] += 1;
        }
        let mut unlabeled = vec![0usize; classes as usize];
        for u in &client.unlabeled {
            unlabeled[u.eval_only_label().index()] += 1;
        }
        for (subset, hist, count) in [
            ("labeled", &labeled, client.labeled.len()),
            ("unlabeled", &unlabeled, client.unlabeled.len()),
        ] {
            let _ = write!(out, "{k},{subset},{count},{mismatch}");
            for v in hist {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Full dataset dump: split tag, owning client (train only), subset tag,
/// label, then the feature columns.
pub fn render_dataset_dump(prepared: &PreparedData) -> String {
    let dim = prepared.shape.dim();
    let mut out = String::from("split,client,subset,label");
    for j in 0..dim {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    let mut push_row = |split: &str, client: &str, subset: &str, label: u32, features: &[f64]| {
        let _ = write!(out, "{split},{client},{subset},{label}");
        for v in features {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    };
    for (k, c) in prepared.clients.iter().enumerate() {
        let client = k.to_string();
        for s in &c.labeled {
            push_row("train", &client, "labeled", s.label.get(), &s.features);
        }
        for u in &c.unlabeled {
            push_row("train", &client, "unlabeled", u.eval_only_label().get(), &u.features);
        }
    }
    for s in &prepared.val_set {
        push_row("val", "", "", s.label.get(), &s.features);
    }
    for s in &prepared.test_set {
        push_row("test", "", "", s.label.get(), &s.features);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(format!("writing {}", path.display()), e))
}
