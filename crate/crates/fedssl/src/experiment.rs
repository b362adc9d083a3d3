//! Experiment and sweep drivers.
//!
//! A run is a pure function of its resolved config: the metrics CSV, the
//! config echo, the summary, and the checkpoint are byte-identical across
//! invocations. A sweep is the cross product of dotted-key overrides
//! applied to a base config, one run per combination, with an aggregated
//! CSV and a rank-ordered summary.

use std::path::{Path, PathBuf};

use fedssl_core::fed::{run_training_with_model, RoundMetrics};
use fedssl_core::nn::ModelParams;

use crate::config::{ConfigError, ExperimentConfig, ENV_SEED};
use crate::dataset::prepare;
use crate::metrics::{
    render_decisions_csv, render_metrics_csv, render_summary, write_text,
};
use crate::{checkpoint, HarnessError};

pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// Zero-aggregation-weight rounds, if any.
    pub warnings: Vec<String>,
}

/// Validates, prepares data, and trains; no filesystem output.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<(Vec<RoundMetrics>, ModelParams), HarnessError> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let method = cfg.method_config()?;
    let opts = cfg.run_options(prepared.shape);
    let (metrics, model) =
        run_training_with_model(&prepared.clients, &prepared.arch, &method, &opts, &prepared.test_set)?;
    Ok((metrics, model))
}

/// Runs the experiment and writes all artifacts under `cfg.output_dir`:
/// `metrics.csv`, `summary.txt`, `config-resolved.toml`, plus
/// `decisions.csv` and `global_model.fssl` when enabled.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    let (metrics, model) = run_in_memory(cfg)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| HarnessError::io(format!("creating {}", dir.display()), e))?;

    let metrics_path = dir.join("metrics.csv");
    write_text(&metrics_path, &render_metrics_csv(&metrics))?;
    write_text(&dir.join("summary.txt"), &render_summary(&metrics))?;
    let echo = toml::to_string_pretty(cfg).expect("config serializes");
    write_text(&dir.join("config-resolved.toml"), &echo)?;
    if cfg.output.audit_decisions {
        write_text(&dir.join("decisions.csv"), &render_decisions_csv(&metrics))?;
    }
    if cfg.output.save_checkpoint {
        checkpoint::save(&dir.join("global_model.fssl"), &model)?;
    }

    let warnings = metrics
        .iter()
        .filter(|m| m.zero_weight)
        .map(|m| format!("round {}: all aggregation weights were zero; global model unchanged", m.round))
        .collect();
    let final_accuracy = metrics.last().map_or(f64::NAN, |m| m.test_accuracy);
    let best_accuracy = metrics.iter().map(|m| m.test_accuracy).fold(f64::NAN, f64::max);
    Ok(RunArtifacts { metrics_path, final_accuracy, best_accuracy, warnings })
}

// --- sweeps ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepSpec {
    /// Base config as a TOML tree; overrides are applied to it per run.
    base: toml::Table,
    /// Sorted (key, values) axes.
    axes: Vec<(String, Vec<toml::Value>)>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub run: String,
    pub overrides: String,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

pub struct SweepOutcome {
    pub summary_path: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// Parses a sweep file: an optional `base` (inline table or path to a
/// config, relative to the sweep file), an optional `output_dir`, and a
/// `[grid]` table mapping dotted config keys to value arrays.
pub fn parse_sweep(path: &Path) -> Result<SweepSpec, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut table: toml::Table = toml::from_str(&text)
        .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source: Box::new(source) })?;

    let mut base = match table.remove("base") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t,
        Some(toml::Value::String(rel)) => {
            let base_path = path.parent().unwrap_or(Path::new(".")).join(rel);
            let base_text = std::fs::read_to_string(&base_path)
                .map_err(|source| ConfigError::Io { path: base_path.clone(), source })?;
            toml::from_str(&base_text)
                .map_err(|source| ConfigError::Parse { path: base_path, source: Box::new(source) })?
        }
        Some(other) => {
            return Err(ConfigError::Grid(format!(
                "base must be a table or a path string, got {}",
                other.type_str()
            ))
            .into())
        }
    };

    if let Ok(v) = std::env::var(ENV_SEED) {
        let seed = v.parse::<u64>().map_err(|_| ConfigError::BadSeedOverride { value: v })?;
        base.insert("seed".into(), toml::Value::Integer(seed as i64));
    }

    let output_dir = match table.remove("output_dir") {
        Some(toml::Value::String(s)) => PathBuf::from(s),
        Some(other) => {
            return Err(ConfigError::Grid(format!(
                "output_dir must be a string, got {}",
                other.type_str()
            ))
            .into())
        }
        None => base
            .get("output_dir")
            .and_then(|v| v.as_str())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("fedssl-sweep")),
    };

    let grid = match table.remove("grid") {
        Some(toml::Value::Table(g)) => g,
        Some(_) => return Err(ConfigError::Grid("grid must be a table".into()).into()),
        None => return Err(ConfigError::Grid("missing [grid] table".into()).into()),
    };
    if let Some(stray) = table.keys().next() {
        return Err(ConfigError::Grid(format!("unknown top-level key {stray:?}")).into());
    }

    let mut axes = Vec::with_capacity(grid.len());
    for (key, value) in grid {
        let toml::Value::Array(values) = value else {
            return Err(ConfigError::Grid(format!("grid key {key:?} must map to an array")).into());
        };
        if values.is_empty() {
            return Err(ConfigError::Grid(format!("grid key {key:?} has no values")).into());
        }
        axes.push((key, values));
    }
    axes.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(SweepSpec { base, axes, output_dir })
}

fn set_dotted(table: &mut toml::Table, dotted: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts = dotted.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry.as_table_mut().ok_or_else(|| {
            ConfigError::Grid(format!("grid key {dotted:?}: {part:?} is not a table in the base config"))
        })?;
    }
    unreachable!("split always yields at least one part")
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// All override combinations in deterministic order (axes sorted by key,
/// last axis fastest), as `(run label, "k=v;...", resolved config)`.
pub fn expand_sweep(spec: &SweepSpec) -> Result<Vec<(String, String, ExperimentConfig)>, HarnessError> {
    let mut combos = Vec::new();
    let total: usize = spec.axes.iter().map(|(_, v)| v.len()).product();
    for idx in 0..total {
        let mut rem = idx;
        let mut picks: Vec<(usize, &toml::Value)> = Vec::with_capacity(spec.axes.len());
        for (_, values) in spec.axes.iter().rev() {
            picks.push((rem % values.len(), &values[rem % values.len()]));
            rem /= values.len();
        }
        picks.reverse();

        let mut tree = spec.base.clone();
        let mut overrides = Vec::with_capacity(spec.axes.len());
        for ((key, _), (_, value)) in spec.axes.iter().zip(&picks) {
            set_dotted(&mut tree, key, (*value).clone())?;
            overrides.push(format!("{key}={}", value_label(value)));
        }
        let label = format!("run_{idx:03}");
        let run_dir = spec.output_dir.join("runs").join(&label);
        set_dotted(&mut tree, "output_dir", toml::Value::String(run_dir.to_string_lossy().into_owned()))?;

        let cfg: ExperimentConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Grid(format!("run {label}: {e}")))?;
        cfg.validate()?;
        combos.push((label, overrides.join(";"), cfg));
    }
    Ok(combos)
}

/// Runs every combination and writes `runs.csv` (execution order) and
/// `sweep_summary.csv` (sorted by final accuracy, best first) under the
/// sweep output directory. `progress` is called after each finished run.
pub fn run_sweep(
    spec: &SweepSpec,
    mut progress: impl FnMut(&SweepRow),
) -> Result<SweepOutcome, HarnessError> {
    let combos = expand_sweep(spec)?;
    std::fs::create_dir_all(&spec.output_dir)
        .map_err(|e| HarnessError::io(format!("creating {}", spec.output_dir.display()), e))?;

    let mut rows = Vec::with_capacity(combos.len());
    for (label, overrides, cfg) in combos {
        let artifacts = run_experiment(&cfg)?;
        let row = SweepRow {
            run: label,
            overrides,
            final_accuracy: artifacts.final_accuracy,
            best_accuracy: artifacts.best_accuracy,
        };
        progress(&row);
        rows.push(row);
    }

    let render = |rows: &[SweepRow]| {
        let mut text = String::from("run,overrides,final_acc,best_acc\n");
        for r in rows {
            text.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.run, r.overrides, r.final_accuracy, r.best_accuracy
            ));
        }
        text
    };
    write_text(&spec.output_dir.join("runs.csv"), &render(&rows))?;

    let mut ranked: Vec<SweepRow> = rows.clone();
    ranked.sort_by(|a, b| {
        b.final_accuracy
            .partial_cmp(&a.final_accuracy)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.run.cmp(&b.run))
    });
    let summary_path = spec.output_dir.join("sweep_summary.csv");
    write_text(&summary_path, &render(&ranked))?;
    Ok(SweepOutcome { summary_path, rows })
}
