//! A synthetic feedback-loop world with known click preferences.
//!
//! Users and items carry latent vectors; the click probability is
//! `s(scale <p_u, q_v> / sqrt(dim) + drift [v follows the last click])`.
//! User latents share a common direction, so items also have a global
//! quality. A logging policy that favours a popularity prior unrelated to
//! quality (optionally mixed with a model retrained on past clicks) decides
//! what gets exposed, which is what makes the logged clicks biased.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Catalog, Event, EventKind, EventLog};
use crate::encoders::{sigmoid, Architecture, Model, ModelConfig, Scorer, DEFAULT_CLICK_LEN};
use crate::error::{Error, Result};
use crate::evaluation::{metric_at_rank, rank_logits, MetricKind, TestCase};
use crate::trainer::{train, Method, TrainSettings};

pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    /// Multiplier of the normalised latent dot product.
    pub scale: f64,
    /// Length of the mean direction added to every user latent.
    pub user_mean: f64,
    /// Offset of every item latent along the same direction; negative values
    /// make most items unattractive to most users.
    pub item_mean: f64,
    /// Logit bonus for successors of the user's last click.
    pub drift: f64,
    /// Successors per item.
    pub successors: usize,
    /// Exponent of the Zipf popularity prior.
    pub zipf: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 300,
            dim: 8,
            scale: 3.0,
            user_mean: 3.0,
            item_mean: -3.0,
            drift: 1.0,
            successors: 5,
            zipf: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthWorld {
    pub config: WorldConfig,
    pub user_latent: Array2<f64>,
    pub item_latent: Array2<f64>,
    /// Sorted successor set of every item.
    pub successors: Vec<Vec<usize>>,
    /// Zipf prior over a random permutation of the items; sums to one.
    pub prior: Vec<f64>,
    pub seed: u64,
}

impl GroundTruthWorld {
    pub fn n_users(&self) -> usize {
        self.config.n_users
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }

    pub fn logit(&self, user: usize, item: usize, last: Option<usize>) -> f64 {
        let dot = self.user_latent.row(user).dot(&self.item_latent.row(item));
        let bonus = match last {
            Some(l) if self.successors[l].binary_search(&item).is_ok() => self.config.drift,
            _ => 0.0,
        };
        self.config.scale * dot / (self.config.dim as f64).sqrt() + bonus
    }

    /// Click probability of `item` for `user` right after clicking `last`.
    pub fn pi(&self, user: usize, item: usize, last: Option<usize>) -> f64 {
        sigmoid(self.logit(user, item, last))
    }

    pub fn pi_row(&self, user: usize, last: Option<usize>) -> Vec<f64> {
        (0..self.n_items()).map(|v| self.pi(user, v, last)).collect()
    }

    /// Zero-padded ids, so id order equals index order.
    pub fn catalog(&self) -> Catalog {
        let uw = digits(self.n_users());
        let iw = digits(self.n_items());
        Catalog::new(
            (0..self.n_users()).map(|u| format!("u{u:0uw$}")),
            (0..self.n_items()).map(|i| format!("i{i:0iw$}")),
        )
        .expect("generated ids are unique")
    }
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

pub fn generate_world(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Result<GroundTruthWorld> {
    generate_world_with(&WorldConfig { n_users, n_items, dim, ..WorldConfig::default() }, seed)
}

pub fn generate_world_with(config: &WorldConfig, seed: u64) -> Result<GroundTruthWorld> {
    if config.n_users < 2 || config.n_items < 2 || config.dim < 1 {
        return Err(Error::Config("world needs at least 2 users, 2 items and dim 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut mean: Vec<f64> = (0..config.dim).map(|_| normal(&mut rng)).collect();
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    mean.iter_mut().for_each(|x| *x /= norm);
    let user_latent = Array2::from_shape_fn((config.n_users, config.dim), |(_, j)| {
        config.user_mean * mean[j] + normal(&mut rng)
    });
    let item_latent = Array2::from_shape_fn((config.n_items, config.dim), |(_, j)| {
        config.item_mean * mean[j] + normal(&mut rng)
    });

    let n_succ = config.successors.min(config.n_items - 1);
    let successors = (0..config.n_items)
        .map(|i| {
            let mut others: Vec<usize> = (0..config.n_items).filter(|&j| j != i).collect();
            others.shuffle(&mut rng);
            let mut s = others[..n_succ].to_vec();
            s.sort_unstable();
            s
        })
        .collect();

    let mut order: Vec<usize> = (0..config.n_items).collect();
    order.shuffle(&mut rng);
    let mut prior = vec![0.0; config.n_items];
    for (rank, &item) in order.iter().enumerate() {
        prior[item] = 1.0 / ((rank + 1) as f64).powf(config.zipf);
    }
    let total: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= total);

    Ok(GroundTruthWorld { config: *config, user_latent, item_latent, successors, prior, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Uniform,
    PopularitySkewed,
    /// Popularity skew plus the logits of a recurrent model retrained on
    /// all clicks after every round.
    ModelBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingPolicy {
    pub kind: PolicyKind,
    pub slate: usize,
    pub rounds: usize,
    /// Weight of the log popularity prior in the slate score.
    pub skew: f64,
    pub model_dim: usize,
    pub model_epochs: usize,
}

impl Default for LoggingPolicy {
    fn default() -> Self {
        Self { kind: PolicyKind::ModelBased, slate: 10, rounds: 20, skew: 0.5, model_dim: 16, model_epochs: 2 }
    }
}

impl LoggingPolicy {
    fn validate(&self, n_items: usize) -> Result<()> {
        if self.slate == 0 || self.slate > n_items {
            return Err(Error::Config(format!("slate size {} must lie in 1..={n_items}", self.slate)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("at least one round is needed".into()));
        }
        if !(self.skew >= 0.0) {
            return Err(Error::Config(format!("skew {} must be non-negative", self.skew)));
        }
        Ok(())
    }
}

/// Simulates `policy.rounds` rounds of exposure and clicking. Timestamps are
/// `round * slate + position`; a click shares its exposure's timestamp.
pub fn run_feedback_loop(world: &GroundTruthWorld, policy: &LoggingPolicy, seed: u64) -> Result<EventLog> {
    let n_items = world.n_items();
    policy.validate(n_items)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    let base: Vec<f64> = match policy.kind {
        PolicyKind::Uniform => vec![0.0; n_items],
        _ => world.prior.iter().map(|p| policy.skew * p.ln()).collect(),
    };
    let mut model = (policy.kind == PolicyKind::ModelBased).then(|| {
        Model::new(
            ModelConfig::new(Architecture::Recurrent, n_items, policy.model_dim, DEFAULT_CLICK_LEN),
            seed ^ 0x10_9e37,
        )
    });

    let mut clicks: Vec<Vec<usize>> = vec![Vec::new(); world.n_users()];
    let mut events = Vec::new();
    for round in 0..policy.rounds {
        if let Some(m) = model.as_mut() {
            if round > 0 && clicks.iter().any(|c| c.len() >= 2) {
                let settings = TrainSettings {
                    epochs: policy.model_epochs,
                    seed: seed.wrapping_add(round as u64),
                    ..TrainSettings::default()
                };
                train(m, &clicks, &Method::Vanilla, &settings, None)?;
            }
        }
        for (user, history) in clicks.iter_mut().enumerate() {
            let mut scores = base.clone();
            if let (Some(m), false, true) = (model.as_ref(), history.is_empty(), round > 0) {
                for (s, l) in scores.iter_mut().zip(m.item_logits(history)?) {
                    *s += l;
                }
            }
            for s in &mut scores {
                *s += gumbel.sample(&mut rng);
            }
            let slate = &rank_logits(&scores)[..policy.slate];
            let last = history.last().copied();
            let mut new_clicks = Vec::new();
            for (pos, &item) in slate.iter().enumerate() {
                let timestamp = (round * policy.slate + pos) as u64;
                events.push(Event { user, item, timestamp, kind: EventKind::Exposure });
                if rng.random::<f64>() < world.pi(user, item, last) {
                    events.push(Event { user, item, timestamp, kind: EventKind::Click });
                    new_clicks.push(item);
                }
            }
            history.extend(new_clicks);
        }
    }
    EventLog::from_events(world.catalog(), events)
}

/// Gini coefficient of non-negative counts (0 = perfectly even).
pub fn gini(counts: &[u64]) -> f64 {
    let n = counts.len();
    let total: u64 = counts.iter().sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let weighted: f64 = sorted.iter().enumerate().map(|(i, &c)| (i + 1) as f64 * c as f64).sum();
    2.0 * weighted / (n as f64 * total as f64) - (n as f64 + 1.0) / n as f64
}

pub fn exposure_counts(log: &EventLog) -> Vec<u64> {
    let mut counts = vec![0; log.catalog().n_items()];
    for e in log.iter().filter(|e| e.kind == EventKind::Exposure) {
        counts[e.item] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMode {
    /// Exact expectation over the next-click distribution.
    Exact,
    /// Average over sampled next clicks.
    Sampled { draws: usize, seed: u64 },
}

/// Expected metric of a ranking when the next click is drawn from
/// `pi(user, ., last prefix click)` normalised over the whole catalog.
pub fn oracle_evaluate(
    scorer: &dyn Scorer,
    world: &GroundTruthWorld,
    cases: &[TestCase],
    k: usize,
    kind: MetricKind,
    mode: OracleMode,
) -> Result<f64> {
    oracle_evaluate_with(|c| scorer.item_logits(&c.prefix), world, cases, k, kind, mode)
}

/// As [`oracle_evaluate`] with arbitrary per-case logits.
pub fn oracle_evaluate_with(
    logits: impl Fn(&TestCase) -> Result<Vec<f64>>,
    world: &GroundTruthWorld,
    cases: &[TestCase],
    k: usize,
    kind: MetricKind,
    mode: OracleMode,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = match mode {
        OracleMode::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        OracleMode::Exact => None,
    };
    let mut total = 0.0;
    for case in cases {
        let ranking = rank_logits(&logits(case)?);
        let mut value_at = vec![0.0; world.n_items()];
        for (pos, &item) in ranking.iter().enumerate() {
            value_at[item] = metric_at_rank(pos + 1, k, kind);
        }
        let pi = world.pi_row(case.user, case.prefix.last().copied());
        let mass: f64 = pi.iter().sum();
        total += match (&mode, rng.as_mut()) {
            (OracleMode::Sampled { draws, .. }, Some(rng)) => {
                let mut acc = 0.0;
                for _ in 0..*draws {
                    let mut x = rng.random::<f64>() * mass;
                    let mut pick = pi.len() - 1;
                    for (v, &p) in pi.iter().enumerate() {
                        if x < p {
                            pick = v;
                            break;
                        }
                        x -= p;
                    }
                    acc += value_at[pick];
                }
                acc / *draws as f64
            }
            _ => pi.iter().zip(&value_at).map(|(p, c)| p * c).sum::<f64>() / mass,
        };
    }
    Ok(total / cases.len() as f64)
}

/// Logits that rank items by their true click probability for the case.
pub fn true_preference_logits(world: &GroundTruthWorld, case: &TestCase) -> Vec<f64> {
    (0..world.n_items()).map(|v| world.logit(case.user, v, case.prefix.last().copied())).collect()
}

/// Everything needed to rebuild a world for later oracle evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSidecar {
    pub format_version: u32,
    pub seed: u64,
    pub config: WorldConfig,
    pub policy: Option<LoggingPolicy>,
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    pub successors: Vec<Vec<usize>>,
    pub prior: Vec<f64>,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], expected: (usize, usize)) -> Result<Array2<f64>> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if rows.len() != expected.0 || rows.iter().any(|r| r.len() != expected.1) {
        return Err(Error::Checkpoint(format!("latent matrix is not {}x{}", expected.0, expected.1)));
    }
    Array2::from_shape_vec(expected, flat).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl WorldSidecar {
    pub fn new(world: &GroundTruthWorld, policy: Option<LoggingPolicy>) -> Self {
        Self {
            format_version: WORLD_FORMAT_VERSION,
            seed: world.seed,
            config: world.config,
            policy,
            user_latent: rows(&world.user_latent),
            item_latent: rows(&world.item_latent),
            successors: world.successors.clone(),
            prior: world.prior.clone(),
        }
    }

    pub fn into_world(self) -> Result<GroundTruthWorld> {
        if self.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported world format {}", self.format_version)));
        }
        let c = self.config;
        if self.successors.len() != c.n_items || self.prior.len() != c.n_items {
            return Err(Error::Checkpoint("world sidecar item tables have the wrong length".into()));
        }
        Ok(GroundTruthWorld {
            user_latent: from_rows(&self.user_latent, (c.n_users, c.dim))?,
            item_latent: from_rows(&self.item_latent, (c.n_items, c.dim))?,
            successors: self.successors,
            prior: self.prior,
            seed: self.seed,
            config: c,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::parse_event_log;

    fn small() -> GroundTruthWorld {
        generate_world(30, 40, 4, 7).unwrap()
    }

    #[test]
    fn deterministic_and_spread() {
        assert_eq!(small(), small());
        let w = generate_world(100, 100, 8, 1).unwrap();
        let mut all = Vec::new();
        for u in 0..100 {
            all.extend(w.pi_row(u, None));
        }
        assert!(all.iter().all(|p| (0.0..=1.0).contains(p)));
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let std = (all.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        assert!(std > 0.01, "std {std}");
        assert!(generate_world(1, 5, 2, 0).is_err());
    }

    #[test]
    fn zero_latents_give_one_half() {
        let mut w = small();
        w.user_latent.fill(0.0);
        w.item_latent.fill(0.0);
        for u in 0..5 {
            assert!(w.pi_row(u, None).iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn uniform_policy_with_certain_clicks() {
        let mut w = small();
        // huge shared preference drives every logit to +inf
        w.user_latent.fill(100.0);
        w.item_latent.fill(100.0);
        let policy = LoggingPolicy { kind: PolicyKind::Uniform, slate: 5, rounds: 3, ..LoggingPolicy::default() };
        let log = run_feedback_loop(&w, &policy, 2).unwrap();
        let exposures = log.iter().filter(|e| e.kind == EventKind::Exposure).count();
        let clicks = log.iter().filter(|e| e.kind == EventKind::Click).count();
        assert_eq!(exposures, 30 * 5 * 3);
        assert_eq!(clicks, exposures);
    }

    #[test]
    fn popularity_policy_is_more_skewed_and_log_reparses() {
        let w = small();
        let uniform = LoggingPolicy { kind: PolicyKind::Uniform, slate: 5, rounds: 4, ..LoggingPolicy::default() };
        let skewed = LoggingPolicy { kind: PolicyKind::PopularitySkewed, ..uniform };
        let lu = run_feedback_loop(&w, &uniform, 3).unwrap();
        let ls = run_feedback_loop(&w, &skewed, 3).unwrap();
        assert!(gini(&exposure_counts(&ls)) > gini(&exposure_counts(&lu)));
        let back = parse_event_log(ls.to_tsv().as_bytes()).unwrap();
        assert_eq!(back.len(), ls.len());
        // every round exposes exactly `slate` distinct items
        for u in 0..w.n_users() {
            for round in 0..4u64 {
                let mut items: Vec<usize> = ls
                    .events(u)
                    .iter()
                    .filter(|e| e.kind == EventKind::Exposure && e.timestamp / 5 == round)
                    .map(|e| e.item)
                    .collect();
                items.sort_unstable();
                items.dedup();
                assert_eq!(items.len(), 5);
            }
        }
    }

    #[test]
    fn model_based_loop_is_deterministic() {
        let w = small();
        let policy = LoggingPolicy { slate: 4, rounds: 3, model_dim: 4, model_epochs: 1, ..LoggingPolicy::default() };
        let a = run_feedback_loop(&w, &policy, 5).unwrap();
        let b = run_feedback_loop(&w, &policy, 5).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[3, 3, 3, 3]), 0.0);
        assert!((gini(&[0, 0, 0, 8]) - 0.75).abs() < 1e-12);
        // mean absolute difference oracle
        let x = [1u64, 4, 2, 9, 0];
        let n = x.len() as f64;
        let mean = x.iter().sum::<u64>() as f64 / n;
        let mad: f64 = x.iter().flat_map(|a| x.iter().map(move |b| (*a as f64 - *b as f64).abs())).sum();
        assert!((gini(&x) - mad / (2.0 * n * n * mean)).abs() < 1e-12);
    }

    fn cases(w: &GroundTruthWorld) -> Vec<TestCase> {
        (0..w.n_users()).map(|u| TestCase { user: u, prefix: vec![u % w.n_items()], target: 0 }).collect()
    }

    #[test]
    fn true_preference_is_oracle_optimal() {
        let w = small();
        let cs = cases(&w);
        let best = oracle_evaluate_with(|c| Ok(true_preference_logits(&w, c)), &w, &cs, 10, MetricKind::Ndcg, OracleMode::Exact).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let noise: Vec<f64> = (0..w.n_items()).map(|_| rng.random()).collect();
            let other = oracle_evaluate_with(|_| Ok(noise.clone()), &w, &cs, 10, MetricKind::Ndcg, OracleMode::Exact).unwrap();
            assert!(best >= other);
        }
    }

    #[test]
    fn random_ranker_recall_is_k_over_n() {
        let w = generate_world(200, 50, 4, 3).unwrap();
        let cs = cases(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let per_case: Vec<Vec<f64>> = cs.iter().map(|_| (0..50).map(|_| rng.random()).collect()).collect();
        let value = oracle_evaluate_with(
            |c| Ok(per_case[c.user].clone()),
            &w,
            &cs,
            10,
            MetricKind::Recall,
            OracleMode::Sampled { draws: 20, seed: 4 },
        )
        .unwrap();
        // 4000 Bernoulli(0.2) draws: standard error about 0.0063
        assert!((value - 0.2).abs() < 0.03, "{value}");
        let again = oracle_evaluate_with(
            |c| Ok(per_case[c.user].clone()),
            &w,
            &cs,
            10,
            MetricKind::Recall,
            OracleMode::Sampled { draws: 20, seed: 4 },
        )
        .unwrap();
        assert_eq!(value, again);
    }

    #[test]
    fn sidecar_round_trip() {
        let w = small();
        let json = serde_json::to_string(&WorldSidecar::new(&w, Some(LoggingPolicy::default()))).unwrap();
        let back: WorldSidecar = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_world().unwrap(), w);
    }
}
