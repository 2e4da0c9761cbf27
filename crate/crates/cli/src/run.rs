//! The five commands. Each one reads and writes fixed file names inside a
//! run directory that must already exist.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use exposure_dro::baselines::median_exposure_probability;
use exposure_dro::datamodel::{parse_event_log, DatasetSplit, EventLog};
use exposure_dro::encoders::checkpoint::{load_model, save_model};
use exposure_dro::encoders::Model;
use exposure_dro::evaluation::{evaluate, MetricEntry, MetricKind, MetricsReport};
use exposure_dro::exposure::{load_simulator, save_simulator, ExposureSimulator};
use exposure_dro::pipeline::{
    click_sequences, evaluation_simulator, exposure_simulator, simulate, split_log, test_cases, train_recommender,
};
use exposure_dro::synthworld::{oracle_evaluate, OracleMode, WorldSidecar};
use exposure_dro::trainer::{ExposureSource, Method, TrainReport};

use crate::config::{ExperimentConfig, MethodName};
use crate::error::{CliError, Result};

pub const EVENTS_FILE: &str = "events.tsv";
pub const WORLD_FILE: &str = "world.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const EXPO_SIM_FILE: &str = "expo_sim.json";
pub const EVAL_SIM_FILE: &str = "eval_sim.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::MissingDir(dir.to_path_buf()))
    }
}

fn require_file(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingFile(path))
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn log_path(config: &ExperimentConfig, out: &Path) -> PathBuf {
    config.log_file.clone().unwrap_or_else(|| out.join(EVENTS_FILE))
}

/// Parses the run's event log and recomputes its split.
pub fn load_logged(config: &ExperimentConfig, out: &Path) -> Result<(EventLog, DatasetSplit)> {
    let path = require_file(log_path(config, out))?;
    let file = std::fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let log = parse_event_log(BufReader::new(file))?;
    let split = split_log(&log, &config.settings(), config.seed)?;
    Ok((log, split))
}

/// Generates a world, runs the logging loop and writes the event log plus
/// the world sidecar.
pub fn cmd_simulate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    require_dir(out)?;
    let settings = config.settings();
    let data = simulate(&settings, config.seed)?;
    write(&out.join(EVENTS_FILE), &data.log.to_tsv())?;
    WorldSidecar::new(&data.world, Some(settings.policy)).save(&out.join(WORLD_FILE))?;
    config.save(&out.join(CONFIG_FILE))
}

/// Trains the exposure simulator and the separate evaluation simulator.
pub fn cmd_train_exposure(config: &ExperimentConfig, out: &Path) -> Result<(ExposureSimulator, ExposureSimulator)> {
    require_dir(out)?;
    let (log, split) = load_logged(config, out)?;
    let settings = config.settings();
    let expo = exposure_simulator(&log, &split, &settings, config.seed)?;
    let eval = evaluation_simulator(&log, &split, &settings, config.seed)?;
    save_simulator(&expo, &out.join(EXPO_SIM_FILE))?;
    save_simulator(&eval, &out.join(EVAL_SIM_FILE))?;
    config.save(&out.join(CONFIG_FILE))?;
    Ok((expo, eval))
}

/// Trains the configured backbone and method; writes the checkpoint and the
/// per-epoch JSON-lines log.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<(Model, TrainReport)> {
    require_dir(out)?;
    let (log, split) = load_logged(config, out)?;
    let settings = config.settings();
    let simulator = match config.method {
        MethodName::Vanilla => None,
        _ => Some(load_simulator(&require_file(out.join(EXPO_SIM_FILE))?)?),
    };
    let source = simulator.as_ref().map(|s| s as &dyn ExposureSource);
    let method = match config.method {
        MethodName::Vanilla => Method::Vanilla,
        MethodName::Ips => Method::Ips,
        MethodName::RelMf => Method::RelMf,
        MethodName::Dro => Method::Dro { a: config.a },
        MethodName::IpsClipped => {
            let seqs = click_sequences(&log, &split.users.train);
            let sim = simulator.as_ref().expect("loaded above");
            Method::IpsClipped { clip: median_exposure_probability(sim, &seqs, config.click_len)? }
        }
    };
    let (model, report) = train_recommender(&log, &split, config.backbone, &method, source, &settings, config.seed)?;
    save_model(&model, &out.join(MODEL_FILE))?;
    write(&out.join(TRAIN_LOG_FILE), &report.to_jsonl())?;
    config.save(&out.join(CONFIG_FILE))?;
    Ok((model, report))
}

/// Scores `model` on the test users' last clicks. Oracle metrics are added
/// when the run directory holds the world that generated its own log.
pub fn evaluate_model(config: &ExperimentConfig, out: &Path, model: &Model) -> Result<MetricsReport> {
    let (log, split) = load_logged(config, out)?;
    let eval_sim = load_simulator(&require_file(out.join(EVAL_SIM_FILE))?)?;
    let cases = test_cases(&log, &split, config.click_len);
    let mut report = evaluate(model, &cases, &eval_sim, &config.ks, config.k)?;
    let world_path = out.join(WORLD_FILE);
    if config.log_file.is_none() && world_path.is_file() {
        let world = WorldSidecar::load(&world_path)?.into_world()?;
        for &k in &config.ks {
            for kind in [MetricKind::Recall, MetricKind::Ndcg] {
                let value = oracle_evaluate(model, &world, &cases, k, kind, OracleMode::Exact)?;
                report.entries.push(MetricEntry { metric: kind.name().into(), k, variant: "oracle".into(), value });
            }
        }
        report.entries.sort_by(|a, b| (&a.metric, a.k, &a.variant).cmp(&(&b.metric, b.k, &b.variant)));
    }
    report.seed = config.seed;
    report.config_hash = config.config_hash()?;
    report.revision = env!("CARGO_PKG_VERSION").to_string();
    Ok(report)
}

/// Reloads the checkpoint and writes `metrics.json` and `metrics.csv`.
pub fn cmd_evaluate(config: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    require_dir(out)?;
    let model = load_model(&require_file(out.join(MODEL_FILE))?)?;
    let report = evaluate_model(config, out, &model)?;
    write(&out.join(METRICS_JSON_FILE), &serde_json::to_string_pretty(&report.to_json())?)?;
    write(&out.join(METRICS_CSV_FILE), &report.to_csv())?;
    Ok(report)
}

/// Mean and sample standard deviation; the deviation is `None` for a
/// single value.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// CSV comparison table with one row per experiment label and a mean and
/// std column for every metric, K and variant.
pub fn cmd_report(runs: &[PathBuf]) -> Result<String> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    // label -> column -> values, in first-seen label order
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, BTreeMap<(String, usize, String), Vec<f64>>> = BTreeMap::new();
    for dir in runs {
        require_dir(dir)?;
        let config = ExperimentConfig::load(&require_file(dir.join(CONFIG_FILE))?)?;
        let metrics_path = require_file(dir.join(METRICS_JSON_FILE))?;
        let text = std::fs::read_to_string(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
        let report = MetricsReport::from_json(&serde_json::from_str(&text)?)?;
        let label = config.label();
        if !groups.contains_key(&label) {
            order.push(label.clone());
        }
        let group = groups.entry(label).or_default();
        for e in report.entries {
            group.entry((e.metric, e.k, e.variant)).or_default().push(e.value);
        }
    }
    let mut columns: Vec<(String, usize, String)> =
        groups.values().flat_map(|g| g.keys().cloned()).collect();
    columns.sort();
    columns.dedup();

    let mut out = String::from("label,runs");
    for (metric, k, variant) in &columns {
        out.push_str(&format!(",{variant}_{metric}@{k}_mean,{variant}_{metric}@{k}_std"));
    }
    out.push('\n');
    for label in &order {
        let group = &groups[label];
        let runs = group.values().map(Vec::len).max().unwrap_or(0);
        out.push_str(&format!("{label},{runs}"));
        for col in &columns {
            match group.get(col) {
                Some(values) => {
                    let (mean, std) = mean_std(values);
                    let std = std.map(|s| s.to_string()).unwrap_or_default();
                    out.push_str(&format!(",{mean},{std}"));
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
