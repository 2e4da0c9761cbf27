//! End-to-end experiment steps on the synthetic world: simulate, split,
//! train the two exposure simulators, train a recommender and score it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetSplit, EventKind, EventLog};
use crate::encoders::{Architecture, Head, HeadKind, Model, ModelConfig, Scorer};
use crate::error::{Error, Result};
use crate::evaluation::{last_click_cases, rank_of, TestCase};
use crate::exposure::{train_simulator, ComponentSettings, ExposureSimulator};
use crate::synthworld::{generate_world_with, run_feedback_loop, GroundTruthWorld, LoggingPolicy, WorldConfig};
use crate::trainer::{train, ExposureSource, Method, TrainReport, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub world: WorldConfig,
    pub policy: LoggingPolicy,
    /// Train/valid/test user fractions.
    pub ratios: (f64, f64, f64),
    /// Share of each user's exposures given to the exposure simulator.
    pub expo_fraction: f64,
    pub dim: usize,
    pub click_len: usize,
    pub exposure_len: usize,
    pub beta: f64,
    /// Start both prediction heads at the identity map instead of random.
    pub identity_heads: bool,
    pub train: TrainSettings,
    pub simulator_train: TrainSettings,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            policy: LoggingPolicy::default(),
            ratios: (0.8, 0.1, 0.1),
            expo_fraction: 0.7,
            dim: crate::encoders::DEFAULT_DIM,
            click_len: crate::encoders::DEFAULT_CLICK_LEN,
            exposure_len: crate::encoders::DEFAULT_EXPOSURE_LEN,
            beta: crate::exposure::DEFAULT_BETA,
            identity_heads: true,
            train: TrainSettings::default(),
            simulator_train: TrainSettings { epochs: 10, ..TrainSettings::default() },
        }
    }
}

impl ExperimentSettings {
    pub fn component_settings(&self, seed: u64) -> ComponentSettings {
        ComponentSettings {
            dim: self.dim,
            exposure_len: self.exposure_len,
            identity_heads: self.identity_heads,
            train: TrainSettings { seed, ..self.simulator_train },
        }
    }
}

/// A simulated world, its logged events and the user/exposure split.
pub struct Dataset {
    pub world: GroundTruthWorld,
    pub log: EventLog,
    pub split: DatasetSplit,
}

pub fn simulate(settings: &ExperimentSettings, seed: u64) -> Result<Dataset> {
    let world = generate_world_with(&settings.world, seed)?;
    let log = run_feedback_loop(&world, &settings.policy, seed.wrapping_add(1))?;
    let split = split_log(&log, settings, seed)?;
    Ok(Dataset { world, log, split })
}

/// The user and exposure split used by every step for run seed `seed`.
pub fn split_log(log: &EventLog, settings: &ExperimentSettings, seed: u64) -> Result<DatasetSplit> {
    DatasetSplit::new(log, settings.ratios, seed.wrapping_add(2), settings.expo_fraction)
}

/// Click sequences of `users`, in time order.
pub fn click_sequences(log: &EventLog, users: &[usize]) -> Vec<Vec<usize>> {
    users.iter().map(|&u| log.interaction_seq(u)).collect()
}

/// Simulator trained on the early exposures of train users; the late part
/// is held out.
pub fn exposure_simulator(
    log: &EventLog,
    split: &DatasetSplit,
    settings: &ExperimentSettings,
    seed: u64,
) -> Result<ExposureSimulator> {
    train_simulator(
        &split.expo_sim_part,
        &split.eval_sim_part,
        &split.users.train,
        log.catalog().n_items(),
        settings.beta,
        settings.click_len,
        &settings.component_settings(seed),
    )
}

/// Simulator used only for evaluation propensities, trained on the late
/// exposures of train users and refusing anything from the early part.
pub fn evaluation_simulator(
    log: &EventLog,
    split: &DatasetSplit,
    settings: &ExperimentSettings,
    seed: u64,
) -> Result<ExposureSimulator> {
    train_simulator(
        &split.eval_sim_part,
        &split.expo_sim_part,
        &split.users.train,
        log.catalog().n_items(),
        settings.beta,
        settings.click_len,
        &settings.component_settings(seed.wrapping_add(7)),
    )
}

pub fn new_backbone(arch: Architecture, n_items: usize, settings: &ExperimentSettings, seed: u64) -> Model {
    let mut model = Model::new(ModelConfig::new(arch, n_items, settings.dim, settings.click_len), seed);
    if settings.identity_heads {
        model.params.main_head = Head::identity(settings.dim);
        model.params.dro_head = Head::identity(settings.dim);
    }
    model
}

/// Offset of the recommender's init and shuffle seed from the run seed.
pub const RECOMMENDER_SEED_OFFSET: u64 = 3;

/// Trains a fresh backbone on the click sequences of the train users.
pub fn train_recommender(
    log: &EventLog,
    split: &DatasetSplit,
    arch: Architecture,
    method: &Method,
    exposure: Option<&dyn ExposureSource>,
    settings: &ExperimentSettings,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    let seed = seed.wrapping_add(RECOMMENDER_SEED_OFFSET);
    let seqs = click_sequences(log, &split.users.train);
    let mut model = new_backbone(arch, log.catalog().n_items(), settings, seed);
    let train_settings = TrainSettings { seed, max_len: settings.click_len, ..settings.train };
    let report = train(&mut model, &seqs, method, &train_settings, exposure)?;
    Ok((model, report))
}

/// Held-out last click of every test user.
pub fn test_cases(log: &EventLog, split: &DatasetSplit, max_len: usize) -> Vec<TestCase> {
    let seqs: Vec<(usize, Vec<usize>)> = split.users.test.iter().map(|&u| (u, log.interaction_seq(u))).collect();
    last_click_cases(&seqs, max_len)
}

/// Every late-part exposure of `users`, predicted from the clicks strictly
/// before it. Exposures with no earlier click are skipped.
pub fn held_out_exposure_cases(
    log: &EventLog,
    split: &DatasetSplit,
    users: &[usize],
    max_len: usize,
) -> Vec<TestCase> {
    let mut cases = Vec::new();
    for &u in users {
        let clicks = log.timed_clicks(u);
        for e in split.eval_sim_part.events(u) {
            let before: Vec<usize> = clicks.iter().filter(|(t, _)| *t < e.timestamp).map(|&(_, i)| i).collect();
            if before.is_empty() {
                continue;
            }
            let prefix = before[before.len().saturating_sub(max_len)..].to_vec();
            cases.push(TestCase { user: u, prefix, target: e.item });
        }
    }
    cases
}

/// Fraction of cases whose target is in the scorer's top `k`.
pub fn hit_rate(scorer: &dyn Scorer, cases: &[TestCase], k: usize) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    for c in cases {
        if rank_of(&scorer.item_logits(&c.prefix)?, c.target) <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

/// The `top_fraction` most exposed items over the whole log.
pub fn most_exposed_items(log: &EventLog, top_fraction: f64) -> Vec<usize> {
    let counts = crate::synthworld::exposure_counts(log);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let n = ((counts.len() as f64 * top_fraction).ceil() as usize).clamp(1, counts.len());
    order.truncate(n);
    order
}

/// Mean dro-head probability over (case user, item) pairs where the item is
/// among the most exposed, was exposed to the user and never clicked by them.
pub fn overestimation_score(model: &Model, log: &EventLog, cases: &[TestCase], top_fraction: f64) -> Result<f64> {
    let popular: HashSet<usize> = most_exposed_items(log, top_fraction).into_iter().collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for case in cases {
        let events = log.events(case.user);
        let clicked: HashSet<usize> =
            events.iter().filter(|e| e.kind == EventKind::Click).map(|e| e.item).collect();
        let exposed: HashSet<usize> =
            events.iter().filter(|e| e.kind == EventKind::Exposure).map(|e| e.item).collect();
        let state = model.forward(&case.prefix)?.last_state();
        let logits = model.all_logits(&state, HeadKind::Dro);
        for &v in popular.iter().filter(|v| exposed.contains(v) && !clicked.contains(v)) {
            sum += crate::encoders::sigmoid(logits[v]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(sum / n as f64)
}
