//! The mixture exposure simulator.
//!
//! Two frozen sequential scorers (attention and recurrent) trained to predict
//! the next exposed item, plus an item-popularity term, produce the mixture
//! score `mu0(S, v)`. Normalising it over the catalog gives the nominal
//! exposure distribution `q0(S, .)` consumed by DRO, the propensity baselines
//! and the SNIPS evaluator.
//!
//! Training reads exposure sequences; inference reads the user's
//! *interaction* prefix.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Event, ExposurePart, TaggedSequence};
use crate::encoders::checkpoint::ModelCheckpoint;
use crate::encoders::{Architecture, Head, HeadKind, Model, ModelConfig, Scorer};
use crate::error::{Error, Result};
use crate::trainer::{train, Method, TrainSettings};

pub const DEFAULT_BETA: f64 = 0.3;
pub const SIMULATOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    pub counts: Vec<u64>,
    pub scores: Vec<f64>,
}

impl PopularityTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let max = counts.iter().copied().max().unwrap_or(0);
        let scores = counts
            .iter()
            .map(|&c| if max == 0 { 0.0 } else { c as f64 / max as f64 })
            .collect();
        Self { counts, scores }
    }

    /// True when no item was ever exposed, so every score is zero.
    pub fn is_degenerate(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }
}

/// `f_i = s_i / max_j s_j` over the given exposure events.
pub fn popularity_from<'a>(events: impl IntoIterator<Item = &'a Event>, n_items: usize) -> PopularityTable {
    let mut counts = vec![0u64; n_items];
    for e in events {
        counts[e.item] += 1;
    }
    PopularityTable::from_counts(counts)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Attention,
    Recurrent,
    Popularity,
}

/// Which mixture terms are switched on. The full simulator uses all three;
/// single-component simulators are used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentSet {
    pub attention: bool,
    pub recurrent: bool,
    pub popularity: bool,
}

impl ComponentSet {
    pub const ALL: ComponentSet = ComponentSet { attention: true, recurrent: true, popularity: true };

    pub fn only(c: Component) -> Self {
        ComponentSet {
            attention: c == Component::Attention,
            recurrent: c == Component::Recurrent,
            popularity: c == Component::Popularity,
        }
    }
}

/// A probability vector over the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureDistribution(pub Vec<f64>);

impl ExposureDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }
}

/// Frozen mixture simulator. Fields are private so that trained components
/// cannot be mutated after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureSimulator {
    attention: Model,
    recurrent: Model,
    popularity: PopularityTable,
    beta: f64,
    click_len: usize,
}

impl ExposureSimulator {
    pub fn new(attention: Model, recurrent: Model, popularity: PopularityTable, beta: f64, click_len: usize) -> Result<Self> {
        let n = popularity.n_items();
        if attention.n_items() != n || recurrent.n_items() != n {
            return Err(Error::Shape("simulator components disagree on catalog size".into()));
        }
        if attention.config.arch != Architecture::Attention || recurrent.config.arch != Architecture::Recurrent {
            return Err(Error::Config("simulator needs one attention and one recurrent component".into()));
        }
        if !(beta >= 0.0) {
            return Err(Error::Domain(format!("beta {beta} must be non-negative")));
        }
        Ok(Self { attention, recurrent, popularity, beta, click_len })
    }

    pub fn n_items(&self) -> usize {
        self.popularity.n_items()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn click_len(&self) -> usize {
        self.click_len
    }

    pub fn popularity(&self) -> &PopularityTable {
        &self.popularity
    }

    pub fn component(&self, c: Component) -> Option<&Model> {
        match c {
            Component::Attention => Some(&self.attention),
            Component::Recurrent => Some(&self.recurrent),
            Component::Popularity => None,
        }
    }

    fn recent<'a>(&self, prefix: &'a [usize]) -> Result<&'a [usize]> {
        if prefix.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(&prefix[prefix.len().saturating_sub(self.click_len)..])
    }

    fn component_softmax(model: &Model, items: &[usize]) -> Result<Array2<f64>> {
        let fwd = model.forward(items)?;
        let projected = model.head_outputs(&fwd, HeadKind::Main);
        Ok(softmax_rows(projected.dot(&model.params.item_emb.t())))
    }

    /// `softmax(f)` over the catalog.
    pub fn popularity_softmax(&self) -> Vec<f64> {
        softmax(&self.popularity.scores)
    }

    /// Mixture scores `mu0` for every prefix `inputs[..=p]` of a window of at
    /// most `click_len` real items (T x n).
    pub fn mixture_along(&self, inputs: &[usize], set: ComponentSet) -> Result<Array2<f64>> {
        if inputs.len() > self.click_len {
            return Err(Error::Shape(format!("window of {} exceeds click length {}", inputs.len(), self.click_len)));
        }
        let mut mu = Array2::zeros((inputs.len(), self.n_items()));
        if set.attention {
            mu += &Self::component_softmax(&self.attention, inputs)?;
        }
        if set.recurrent {
            mu += &Self::component_softmax(&self.recurrent, inputs)?;
        }
        if set.popularity {
            let pop = Array1::from(self.popularity_softmax()) * self.beta;
            mu += &pop.insert_axis(Axis(0));
        }
        Ok(mu)
    }

    /// `q0` for every prefix of a window (T x n); rows sum to one.
    pub fn distributions_along(&self, inputs: &[usize], set: ComponentSet) -> Result<Array2<f64>> {
        let mut mu = self.mixture_along(inputs, set)?;
        for mut row in mu.axis_iter_mut(Axis(0)) {
            let total = row.sum();
            row /= total;
        }
        Ok(mu)
    }

    /// `mu0(S, v)` for every item `v`.
    pub fn mixture_scores(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let recent = self.recent(prefix)?;
        let mu = self.mixture_along(recent, ComponentSet::ALL)?;
        Ok(mu.row(mu.nrows() - 1).to_vec())
    }

    pub fn mixture_score(&self, prefix: &[usize], item: usize) -> Result<f64> {
        if item == self.n_items() {
            return Err(Error::PadItem);
        }
        if item > self.n_items() {
            return Err(Error::UnknownItem(item));
        }
        Ok(self.mixture_scores(prefix)?[item])
    }

    pub fn exposure_distribution(&self, prefix: &[usize]) -> Result<ExposureDistribution> {
        self.distribution_with(prefix, ComponentSet::ALL)
    }

    pub fn distribution_with(&self, prefix: &[usize], set: ComponentSet) -> Result<ExposureDistribution> {
        let recent = self.recent(prefix)?;
        let q = self.distributions_along(recent, set)?;
        Ok(ExposureDistribution(q.row(q.nrows() - 1).to_vec()))
    }

    /// A scorer ranking items by (log) exposure probability under `set`.
    pub fn as_scorer(&self, set: ComponentSet) -> SimulatorScorer<'_> {
        SimulatorScorer { sim: self, set }
    }
}

pub struct SimulatorScorer<'a> {
    sim: &'a ExposureSimulator,
    set: ComponentSet,
}

impl Scorer for SimulatorScorer<'_> {
    fn n_items(&self) -> usize {
        self.sim.n_items()
    }

    fn item_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.sim.distribution_with(prefix, self.set)?.0)
    }
}

/// Fails if any event of `train` also belongs to `holdout`.
pub fn check_disjoint(train: &[TaggedSequence], holdout: &ExposurePart) -> Result<()> {
    let held: HashSet<(usize, usize, u64)> =
        holdout.iter().map(|e| (e.user, e.item, e.timestamp)).collect();
    for seq in train {
        if let Some(e) = seq.events.iter().find(|e| held.contains(&(e.user, e.item, e.timestamp))) {
            return Err(Error::Leakage(format!(
                "event (user {}, item {}, t={}) belongs to the held-out exposure part",
                e.user, e.item, e.timestamp
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSettings {
    pub dim: usize,
    pub exposure_len: usize,
    /// Start both prediction heads at the identity map.
    pub identity_heads: bool,
    pub train: TrainSettings,
}

/// Trains one frozen scorer on next-exposed-item prediction.
pub fn train_exposure_component(
    sequences: &[TaggedSequence],
    holdout: &ExposurePart,
    arch: Architecture,
    n_items: usize,
    settings: &ComponentSettings,
) -> Result<Model> {
    if sequences.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_disjoint(sequences, holdout)?;
    let item_seqs: Vec<Vec<usize>> = sequences.iter().map(TaggedSequence::items).collect();
    let config = ModelConfig::new(arch, n_items, settings.dim, settings.exposure_len);
    let seed = settings.train.seed ^ match arch {
        Architecture::Attention => 0x5a5a,
        Architecture::Recurrent => 0xa5a5,
    };
    let mut model = Model::new(config, seed);
    if settings.identity_heads {
        model.params.main_head = Head::identity(settings.dim);
        model.params.dro_head = Head::identity(settings.dim);
    }
    let mut train_settings = settings.train;
    train_settings.seed = seed;
    train_settings.max_len = settings.exposure_len;
    train(&mut model, &item_seqs, &Method::Vanilla, &train_settings, None)?;
    Ok(model)
}

/// Builds a full simulator from the exposures of `users` in `part`, refusing
/// any event that appears in `holdout`.
pub fn train_simulator(
    part: &ExposurePart,
    holdout: &ExposurePart,
    users: &[usize],
    n_items: usize,
    beta: f64,
    click_len: usize,
    settings: &ComponentSettings,
) -> Result<ExposureSimulator> {
    let sequences = part.sequences(users);
    let popularity = popularity_from(sequences.iter().flat_map(|s| s.events.iter()), n_items);
    let attention = train_exposure_component(&sequences, holdout, Architecture::Attention, n_items, settings)?;
    let recurrent = train_exposure_component(&sequences, holdout, Architecture::Recurrent, n_items, settings)?;
    ExposureSimulator::new(attention, recurrent, popularity, beta, click_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorCheckpoint {
    pub format_version: u32,
    pub beta: f64,
    pub click_len: usize,
    pub popularity_counts: Vec<u64>,
    pub attention: ModelCheckpoint,
    pub recurrent: ModelCheckpoint,
}

impl SimulatorCheckpoint {
    pub fn from_simulator(sim: &ExposureSimulator) -> Self {
        Self {
            format_version: SIMULATOR_FORMAT_VERSION,
            beta: sim.beta,
            click_len: sim.click_len,
            popularity_counts: sim.popularity.counts.clone(),
            attention: ModelCheckpoint::from_model(&sim.attention),
            recurrent: ModelCheckpoint::from_model(&sim.recurrent),
        }
    }

    pub fn into_simulator(self) -> Result<ExposureSimulator> {
        if self.format_version != SIMULATOR_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported simulator format {}", self.format_version)));
        }
        ExposureSimulator::new(
            self.attention.into_model()?,
            self.recurrent.into_model()?,
            PopularityTable::from_counts(self.popularity_counts),
            self.beta,
            self.click_len,
        )
    }
}

pub fn save_simulator(sim: &ExposureSimulator, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(&SimulatorCheckpoint::from_simulator(sim))?)?;
    Ok(())
}

pub fn load_simulator(path: &Path) -> Result<ExposureSimulator> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str::<SimulatorCheckpoint>(&text)?.into_simulator()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datamodel::{EventKind, PartRole};
    use crate::encoders::Head;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Simulator over `n` items with random components of width `dim`.
    pub(crate) fn random_simulator(n: usize, dim: usize, seed: u64) -> ExposureSimulator {
        let att = Model::new(ModelConfig::new(Architecture::Attention, n, dim, 20), seed);
        let rec = Model::new(ModelConfig::new(Architecture::Recurrent, n, dim, 20), seed + 1);
        let counts = (0..n as u64).map(|i| (i * 7 + seed) % 11).collect();
        ExposureSimulator::new(att, rec, PopularityTable::from_counts(counts), DEFAULT_BETA, 10).unwrap()
    }

    #[test]
    fn popularity_examples() {
        let t = PopularityTable::from_counts(vec![4, 2, 1]);
        assert_eq!(t.scores, vec![1.0, 0.5, 0.25]);
        let t = PopularityTable::from_counts(vec![3, 3, 3]);
        assert_eq!(t.scores, vec![1.0, 1.0, 1.0]);
        let t = PopularityTable::from_counts(vec![0, 0]);
        assert!(t.is_degenerate());
        assert_eq!(t.scores, vec![0.0, 0.0]);
    }

    #[test]
    fn popularity_matches_hashmap_counting() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let events: Vec<Event> = (0..1000)
            .map(|t| Event { user: 0, item: rng.random_range(0..37), timestamp: t, kind: EventKind::Exposure })
            .collect();
        let table = popularity_from(&events, 40);
        let mut oracle: HashMap<usize, u64> = HashMap::new();
        for e in &events {
            *oracle.entry(e.item).or_default() += 1;
        }
        for i in 0..40 {
            assert_eq!(table.counts[i], oracle.get(&i).copied().unwrap_or(0));
        }
        assert_eq!(table.scores.iter().copied().fold(0.0, f64::max), 1.0);
        assert_eq!(table.scores[39], 0.0);
    }

    fn uniform_simulator() -> ExposureSimulator {
        // zero embeddings give uniform logits in both encoders
        let mut att = Model::new(ModelConfig::new(Architecture::Attention, 3, 4, 5), 0);
        let mut rec = Model::new(ModelConfig::new(Architecture::Recurrent, 3, 4, 5), 1);
        att.params.item_emb.fill(0.0);
        rec.params.item_emb.fill(0.0);
        att.params.main_head = Head::identity(4);
        ExposureSimulator::new(att, rec, PopularityTable::from_counts(vec![5, 5, 5]), 0.3, 5).unwrap()
    }

    #[test]
    fn uniform_case() {
        let sim = uniform_simulator();
        for v in 0..3 {
            let mu = sim.mixture_score(&[0, 1], v).unwrap();
            assert!((mu - (1.0 / 3.0 + 1.0 / 3.0 + 0.3 / 3.0)).abs() < 1e-12);
            assert!((mu - 0.7667).abs() < 1e-4);
        }
        let q = sim.exposure_distribution(&[2]).unwrap();
        for p in q.0 {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(matches!(sim.mixture_score(&[0], 3), Err(Error::PadItem)));
    }

    #[test]
    fn normalisation_and_brute_force_oracle() {
        let sim = random_simulator(5, 8, 3);
        let prefix = [1, 4, 0, 0, 2];
        let mu = sim.mixture_scores(&prefix).unwrap();
        let total: f64 = mu.iter().sum();
        assert!((total - (2.0 + sim.beta())).abs() < 1e-12);
        let q = sim.exposure_distribution(&prefix).unwrap();
        for (qv, mv) in q.0.iter().zip(&mu) {
            assert!((qv - mv / total).abs() < 1e-15);
        }
        // the mixture is exactly the sum of three independently computed softmaxes
        let att = sim.component(Component::Attention).unwrap();
        let rec = sim.component(Component::Recurrent).unwrap();
        let sm = |m: &Model| {
            let logits = m.prefix_logits(&prefix).unwrap();
            let ex: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
            let s: f64 = ex.iter().sum();
            ex.into_iter().map(|e| e / s).collect::<Vec<_>>()
        };
        let (a, r) = (sm(att), sm(rec));
        let fs: Vec<f64> = sim.popularity().scores.iter().map(|f| f.exp()).collect();
        let fsum: f64 = fs.iter().sum();
        for v in 0..5 {
            let expected = a[v] + r[v] + 0.3 * fs[v] / fsum;
            assert!((mu[v] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn leakage_is_detected() {
        let ev = |t| Event { user: 0, item: 1, timestamp: t, kind: EventKind::Exposure };
        let holdout = ExposurePart::new(PartRole::Evaluation, vec![vec![ev(5)]]);
        let clean = vec![TaggedSequence { user: 0, events: vec![ev(1), ev(2)] }];
        let dirty = vec![TaggedSequence { user: 0, events: vec![ev(1), ev(5)] }];
        assert!(check_disjoint(&clean, &holdout).is_ok());
        let settings = ComponentSettings {
            dim: 4,
            exposure_len: 10,
            identity_heads: false,
            train: TrainSettings { epochs: 1, ..TrainSettings::default() },
        };
        let res = train_exposure_component(&dirty, &holdout, Architecture::Recurrent, 3, &settings);
        assert!(matches!(res, Err(Error::Leakage(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let sim = random_simulator(6, 4, 2);
        let json = serde_json::to_string(&SimulatorCheckpoint::from_simulator(&sim)).unwrap();
        let back = serde_json::from_str::<SimulatorCheckpoint>(&json).unwrap().into_simulator().unwrap();
        assert_eq!(sim, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn popularity_order_survives_softmax(counts in proptest::collection::vec(0u64..50, 2..20), beta in 0.0f64..2.0) {
            let n = counts.len();
            let base = random_simulator(n, 4, 0);
            let sim = ExposureSimulator::new(
                base.attention.clone(),
                base.recurrent.clone(),
                PopularityTable::from_counts(counts.clone()),
                beta,
                10,
            )
            .unwrap();
            let p = sim.popularity_softmax();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..n {
                for j in 0..n {
                    if counts[i] > counts[j] {
                        prop_assert!(p[i] > p[j]);
                    }
                }
            }
        }

        #[test]
        fn exposure_distribution_is_ordered_like_mixture(
            prefix in proptest::collection::vec(0usize..7, 1..10),
            seed in 0u64..20,
        ) {
            let sim = random_simulator(7, 4, seed);
            let mu = sim.mixture_scores(&prefix).unwrap();
            let q = sim.exposure_distribution(&prefix).unwrap().0;
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..7 {
                prop_assert!(q[i] > 0.0);
                for j in 0..7 {
                    if mu[i] > mu[j] {
                        prop_assert!(q[i] >= q[j]);
                    }
                }
            }
        }
    }
}
