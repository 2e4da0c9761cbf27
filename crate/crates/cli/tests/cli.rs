use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;

use exposure_dro::datamodel::parse_event_log;
use exposure_dro::evaluation::MetricsReport;
use exposure_dro::exposure::train_simulator;
use exposure_dro::pipeline::{held_out_exposure_cases, split_log};
use exposure_dro::synthworld::{PolicyKind, WorldSidecar};
use exposure_dro_cli::run::{self, evaluate_model, load_logged, mean_std};
use exposure_dro_cli::*;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        n_users: 100,
        n_items: 30,
        slate: 5,
        rounds: 6,
        policy_dim: 8,
        policy_epochs: 1,
        dim: 8,
        epochs: 2,
        simulator_epochs: 2,
        click_len: 10,
        exposure_len: 20,
        ..ExperimentConfig::default()
    }
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(path).unwrap()
}

/// Simulated run dir with both simulators trained.
fn prepared(config: &ExperimentConfig) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    cmd_simulate(config, dir.path()).unwrap();
    cmd_train_exposure(config, dir.path()).unwrap();
    dir
}

#[test]
fn default_config_round_trips() {
    let config = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    config.save(&path).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded, config);
    loaded.save(&path).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), config);
    // documented defaults
    assert_eq!((config.dim, config.lr, config.beta, config.k), (64, 0.005, 0.3, 0.1));
    assert_eq!((config.click_len, config.exposure_len), (50, 200));
    assert_eq!(config.ks, vec![5, 10, 20]);
    assert_eq!((config.n_users, config.n_items, config.latent_dim, config.slate, config.rounds), (500, 300, 8, 10, 20));
    assert_eq!(config.policy, PolicyKind::ModelBased);
}

#[test]
fn config_rejects_typos_versions_and_missing_inputs() {
    assert!(matches!(ExperimentConfig::from_toml("versoin = 1"), Err(CliError::ConfigParse(_))));
    assert!(matches!(ExperimentConfig::from_toml("version = 2"), Err(CliError::Config(_))));
    assert!(matches!(
        ExperimentConfig::from_toml("log_file = \"/no/such/events.tsv\""),
        Err(CliError::MissingFile(_))
    ));
    let partial = ExperimentConfig::from_toml("method = \"ips_c\"\nseed = 9").unwrap();
    assert_eq!(partial.method, MethodName::IpsClipped);
    assert_eq!(partial, ExperimentConfig { method: MethodName::IpsClipped, seed: 9, ..ExperimentConfig::default() });
}

#[test]
fn config_hash_ignores_seed_and_paths() {
    let a = tiny();
    let b = ExperimentConfig { seed: 5, out_dir: Some("/tmp/x".into()), ..tiny() };
    assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
    let c = ExperimentConfig { a: 0.1, ..tiny() };
    assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
}

#[test]
fn simulate_writes_parseable_deterministic_files() {
    let config = tiny();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_simulate(&config, d1.path()).unwrap();
    cmd_simulate(&config, d2.path()).unwrap();
    for f in [run::EVENTS_FILE, run::WORLD_FILE, run::CONFIG_FILE] {
        assert_eq!(read(d1.path().join(f)), read(d2.path().join(f)), "{f} differs");
    }
    let log = parse_event_log(BufReader::new(std::fs::File::open(d1.path().join(run::EVENTS_FILE)).unwrap())).unwrap();
    assert_eq!(log.to_tsv(), read(d1.path().join(run::EVENTS_FILE)));
    assert_eq!(log.catalog().n_items(), 30);
    let world = WorldSidecar::load(&d1.path().join(run::WORLD_FILE)).unwrap().into_world().unwrap();
    assert_eq!(world.config.n_users, 100);
    assert_eq!(ExperimentConfig::load(&d1.path().join(run::CONFIG_FILE)).unwrap(), config);

    let other = ExperimentConfig { seed: 1, ..tiny() };
    let d3 = tempfile::tempdir().unwrap();
    cmd_simulate(&other, d3.path()).unwrap();
    assert_ne!(read(d1.path().join(run::EVENTS_FILE)), read(d3.path().join(run::EVENTS_FILE)));
}

#[test]
fn simulate_requires_existing_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(cmd_simulate(&tiny(), &missing), Err(CliError::MissingDir(p)) if p == missing));
}

#[test]
fn exposure_training_is_deterministic_and_beats_uniform() {
    let config = tiny();
    let (d1, d2) = (prepared(&config), prepared(&config));
    for f in [run::EXPO_SIM_FILE, run::EVAL_SIM_FILE] {
        assert_eq!(read(d1.path().join(f)), read(d2.path().join(f)), "{f} differs");
    }
    // mean log-likelihood of held-out exposures against the uniform 1/n
    let (log, split) = load_logged(&config, d1.path()).unwrap();
    let sim = exposure_dro::exposure::load_simulator(&d1.path().join(run::EXPO_SIM_FILE)).unwrap();
    let cases = held_out_exposure_cases(&log, &split, &split.users.train, config.click_len);
    assert!(!cases.is_empty());
    let ll: f64 = cases
        .iter()
        .map(|c| sim.exposure_distribution(&c.prefix).unwrap().0[c.target].ln())
        .sum::<f64>()
        / cases.len() as f64;
    assert!(ll > (1.0 / 30.0f64).ln(), "simulator log-likelihood {ll}");
}

#[test]
fn exposure_training_detects_leakage() {
    let config = tiny();
    let dir = tempfile::tempdir().unwrap();
    cmd_simulate(&config, dir.path()).unwrap();
    let (log, split) = load_logged(&config, dir.path()).unwrap();
    let s = config.settings();
    let err = train_simulator(
        &split.expo_sim_part,
        &split.expo_sim_part,
        &split.users.train,
        log.catalog().n_items(),
        s.beta,
        s.click_len,
        &s.component_settings(0),
    )
    .map_err(CliError::from)
    .unwrap_err();
    assert_eq!(err.kind(), "leakage");
    assert_eq!(split, split_log(&log, &s, config.seed).unwrap());
}

#[test]
fn train_and_evaluate_contracts() {
    let vanilla = ExperimentConfig { method: MethodName::Vanilla, ..tiny() };
    let dro0 = ExperimentConfig { method: MethodName::Dro, a: 0.0, ..tiny() };
    let dir = prepared(&vanilla);
    let other = tempfile::tempdir().unwrap();
    for f in [run::EVENTS_FILE, run::WORLD_FILE, run::EXPO_SIM_FILE, run::EVAL_SIM_FILE] {
        std::fs::copy(dir.path().join(f), other.path().join(f)).unwrap();
    }

    let (model, report) = cmd_train(&vanilla, dir.path()).unwrap();
    cmd_train(&dro0, other.path()).unwrap();
    // a = 0 is vanilla training
    assert_eq!(read(dir.path().join(run::MODEL_FILE)), read(other.path().join(run::MODEL_FILE)));

    let lines: Vec<serde_json::Value> = read(dir.path().join(run::TRAIN_LOG_FILE))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), vanilla.epochs);
    for (i, line) in lines.iter().enumerate() {
        assert_eq!(line["epoch"].as_u64(), Some(i as u64 + 1));
        for key in ["l_rec", "l_dro", "l_joint", "wall_secs"] {
            assert!(line[key].is_f64(), "{key} missing");
        }
        assert_eq!(line["l_rec"].as_f64(), Some(report.epochs[i].l_rec));
    }

    // the reloaded checkpoint scores exactly like the in-memory model
    let evaluated = cmd_evaluate(&vanilla, dir.path()).unwrap();
    assert_eq!(evaluated, evaluate_model(&vanilla, dir.path(), &model).unwrap());

    for k in [5, 10, 20] {
        for metric in ["recall", "ndcg"] {
            for variant in ["naive", "snips", "oracle"] {
                assert!(evaluated.get(metric, k, variant).is_some(), "{variant} {metric}@{k} missing");
            }
        }
    }

    // JSON and CSV carry the same entries
    let json: serde_json::Value = serde_json::from_str(&read(dir.path().join(run::METRICS_JSON_FILE))).unwrap();
    let from_json = MetricsReport::from_json(&json).unwrap();
    let from_csv = MetricsReport::parse_csv(&read(dir.path().join(run::METRICS_CSV_FILE))).unwrap();
    assert_eq!(from_json.entries, from_csv);
    assert_eq!(from_json, evaluated);

    // k = 0 turns SNIPS into the naive mean
    let k0 = ExperimentConfig { k: 0.0, ..vanilla.clone() };
    let plain = evaluate_model(&k0, dir.path(), &model).unwrap();
    for k in [5, 10, 20] {
        for metric in ["recall", "ndcg"] {
            assert_eq!(plain.get(metric, k, "snips"), plain.get(metric, k, "naive"));
        }
    }
}

#[test]
fn every_method_trains() {
    let config = tiny();
    let dir = prepared(&config);
    for method in [MethodName::Ips, MethodName::IpsClipped, MethodName::RelMf, MethodName::Dro] {
        let c = ExperimentConfig { method, epochs: 1, ..tiny() };
        let (model, _) = cmd_train(&c, dir.path()).unwrap();
        assert!(model.params.all_finite(), "{method:?}");
    }
}

fn fake_run(root: &Path, name: &str, config: &ExperimentConfig, ndcg10: f64) -> PathBuf {
    let dir = root.join(name);
    std::fs::create_dir(&dir).unwrap();
    config.save(&dir.join(run::CONFIG_FILE)).unwrap();
    let json = serde_json::json!({
        "seed": config.seed,
        "snips_k": 0.1,
        "metrics": { "naive": { "ndcg": { "10": ndcg10 } } },
    });
    std::fs::write(dir.join(run::METRICS_JSON_FILE), json.to_string()).unwrap();
    dir
}

#[test]
fn report_aggregates_runs() {
    let root = tempfile::tempdir().unwrap();
    let values = [0.1, 0.2, 0.4, 0.3, 0.5];
    let runs: Vec<PathBuf> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| fake_run(root.path(), &format!("s{i}"), &ExperimentConfig { seed: i as u64, ..tiny() }, v))
        .collect();

    let single = cmd_report(&runs[..1]).unwrap();
    let lines: Vec<&str> = single.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "label,runs,naive_ndcg@10_mean,naive_ndcg@10_std");
    assert_eq!(lines[1], "attention/dro(a=1),1,0.1,");

    let table = cmd_report(&runs).unwrap();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    // hand calculation: mean 0.3, squared deviations sum to 0.1, over n - 1 = 4
    assert_eq!(row[1], "5");
    assert!((row[2].parse::<f64>().unwrap() - 0.3).abs() < 1e-12);
    assert!((row[3].parse::<f64>().unwrap() - 0.025f64.sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[2.0]), (2.0, None));

    let vanilla = fake_run(root.path(), "v", &ExperimentConfig { method: MethodName::Vanilla, ..tiny() }, 0.2);
    let mixed = cmd_report(&[runs[0].clone(), vanilla]).unwrap();
    assert_eq!(mixed.lines().count(), 3);
    assert!(mixed.lines().nth(2).unwrap().starts_with("attention/none,1,"));

    let missing = root.path().join("gone");
    assert!(matches!(cmd_report(&[missing]), Err(CliError::MissingDir(_))));
}

#[test]
fn binary_reports_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_exposure-dro"))
        .args(["simulate", "--out"])
        .arg(dir.path().join("missing"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "missing_dir");

    let config = dir.path().join("c.toml");
    std::fs::write(&config, "n_users = 40\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_exposure-dro"))
        .args(["simulate", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn binary_runs_simulate_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    tiny().save(&config).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_exposure-dro"))
        .args(["simulate", "--seed", "4", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let written = ExperimentConfig::load(&dir.path().join(run::CONFIG_FILE)).unwrap();
    assert_eq!(written.seed, 4);
}
