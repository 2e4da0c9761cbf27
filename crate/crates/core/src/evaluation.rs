//! Ranking metrics, the full-information reward, the SNIPS estimator and a
//! Monte Carlo check of its expectation.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Scorer;
use crate::error::{Error, Result};
use crate::exposure::ExposureSimulator;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
pub const DEFAULT_SNIPS_K: f64 = 0.1;
pub const PROPENSITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Recall,
    Ndcg,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Recall => "recall",
            MetricKind::Ndcg => "ndcg",
        }
    }
}

/// Items by descending logit, ties by ascending item index.
pub fn rank_logits(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

pub fn rank_items(scorer: &dyn Scorer, prefix: &[usize]) -> Result<Vec<usize>> {
    Ok(rank_logits(&scorer.item_logits(prefix)?))
}

/// 1-based position of `target` in the ranking implied by `logits`, without
/// sorting.
pub fn rank_of(logits: &[f64], target: usize) -> usize {
    let t = logits[target];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l > t || (l == t && i < target))
        .count()
}

/// Single-target metric value for a 1-based rank.
pub fn metric_at_rank(rank: usize, k: usize, kind: MetricKind) -> f64 {
    if rank == 0 || rank > k {
        return 0.0;
    }
    match kind {
        MetricKind::Recall => 1.0,
        MetricKind::Ndcg => 1.0 / ((rank + 1) as f64).log2(),
    }
}

pub fn metric_c(ranking: &[usize], target: usize, k: usize, kind: MetricKind) -> Result<f64> {
    let pos = ranking.iter().position(|&i| i == target).ok_or(Error::UnknownItem(target))?;
    Ok(metric_at_rank(pos + 1, k, kind))
}

/// Fraction of the catalog appearing in at least one top-`k` list.
pub fn coverage(rankings: &[Vec<usize>], k: usize, n_items: usize) -> f64 {
    if n_items == 0 {
        return 0.0;
    }
    let seen: HashSet<usize> = rankings.iter().flat_map(|r| r.iter().take(k).copied()).collect();
    seen.len() as f64 / n_items as f64
}

/// `(1/|U|) sum_u (1/|I|) sum_i rel_ui * c(rank_u(i))` given full relevance
/// (users x items).
pub fn ideal_reward(
    rankings: &[Vec<usize>],
    relevance: Option<&Array2<f64>>,
    k: usize,
    kind: MetricKind,
) -> Result<f64> {
    let rel = relevance.ok_or_else(|| Error::NoGroundTruth("full relevance is only known in a synthetic world".into()))?;
    if rel.nrows() != rankings.len() || rankings.is_empty() {
        return Err(Error::Shape("one ranking per relevance row required".into()));
    }
    let n_items = rel.ncols();
    let mut total = 0.0;
    for (u, ranking) in rankings.iter().enumerate() {
        let mut user = 0.0;
        for (pos, &item) in ranking.iter().enumerate() {
            user += rel[[u, item]] * metric_at_rank(pos + 1, k, kind);
        }
        total += user / n_items as f64;
    }
    Ok(total / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnipsValue {
    pub value: f64,
    /// Propensities raised to the floor before weighting.
    pub floored: usize,
}

/// Self-normalised mean of per-user `values` with weights `rho^-k`.
pub fn snips_mean(values: &[f64], rho: &[f64], k: f64) -> Result<SnipsValue> {
    if values.len() != rho.len() {
        return Err(Error::Shape("one propensity per value required".into()));
    }
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::Domain(format!("k = {k} outside [0, 1]")));
    }
    let mut floored = 0;
    let (mut num, mut den) = (0.0, 0.0);
    for (&c, &p) in values.iter().zip(rho) {
        if !(p > 0.0) {
            return Err(Error::Domain(format!("propensity {p} must be positive")));
        }
        let p = if p < PROPENSITY_FLOOR {
            floored += 1;
            PROPENSITY_FLOOR
        } else {
            p
        };
        let w = if k == 0.0 { 1.0 } else { p.powf(-k) };
        num += w * c;
        den += w;
    }
    Ok(SnipsValue { value: num / den, floored })
}

/// A ranking with the held-out target it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedTarget {
    pub ranking: Vec<usize>,
    pub target: usize,
}

pub fn snips_evaluate(
    cases: &[RankedTarget],
    rho: &[f64],
    k: f64,
    top_k: usize,
    kind: MetricKind,
) -> Result<SnipsValue> {
    let values =
        cases.iter().map(|c| metric_c(&c.ranking, c.target, top_k, kind)).collect::<Result<Vec<_>>>()?;
    snips_mean(&values, rho, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasednessReport {
    /// `sum_ui c_ui rho_i^(1-k)`, the exact expectation of the estimator.
    pub exact: f64,
    pub monte_carlo: f64,
    pub relative_deviation: f64,
    /// Standard error of the Monte Carlo mean.
    pub std_error: f64,
    pub trials: usize,
}

/// Draws `O_ui ~ Bernoulli(rho_i)` and averages `sum_ui c_ui / rho_i^k O_ui`.
pub fn debiasedness_check(
    c: &Array2<f64>,
    rho: &[f64],
    k: f64,
    trials: usize,
    seed: u64,
) -> Result<DebiasednessReport> {
    if c.ncols() != rho.len() {
        return Err(Error::Shape("one propensity per item required".into()));
    }
    if trials < 2 {
        return Err(Error::Config("at least two trials are needed".into()));
    }
    if let Some(bad) = rho.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Domain(format!("propensity {bad} outside (0, 1]")));
    }
    let weights: Vec<f64> = rho.iter().map(|&p| p.powf(-k)).collect();
    let exact: f64 = c
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(rho).map(|(&cv, &p)| cv * p.powf(1.0 - k)).sum::<f64>())
        .sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        let mut draw = 0.0;
        for row in c.rows() {
            for (i, &cv) in row.iter().enumerate() {
                if rng.random::<f64>() < rho[i] {
                    draw += cv * weights[i];
                }
            }
        }
        sum += draw;
        sum_sq += draw * draw;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(DebiasednessReport {
        exact,
        monte_carlo: mean,
        relative_deviation: if exact == 0.0 { mean.abs() } else { (mean - exact).abs() / exact.abs() },
        std_error: (var / n).sqrt(),
        trials,
    })
}

/// A held-out next click: the user's prefix and the item that followed it.
#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// Prefix = every click but the last (most recent `max_len`), target = the
/// last click. Users with fewer than two clicks are skipped.
pub fn last_click_cases(click_seqs: &[(usize, Vec<usize>)], max_len: usize) -> Vec<TestCase> {
    click_seqs
        .iter()
        .filter(|(_, s)| s.len() >= 2)
        .map(|(u, s)| {
            let head = &s[..s.len() - 1];
            TestCase {
                user: *u,
                prefix: head[head.len().saturating_sub(max_len)..].to_vec(),
                target: s[s.len() - 1],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub k: usize,
    pub variant: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub revision: String,
    pub snips_k: f64,
    pub n_cases: usize,
    pub floored_propensities: usize,
    pub entries: Vec<MetricEntry>,
}

impl MetricsReport {
    pub fn get(&self, metric: &str, k: usize, variant: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.metric == metric && e.k == k && e.variant == variant)
            .map(|e| e.value)
    }

    /// `{variant: {metric: {K: value}}}` plus run metadata.
    pub fn to_json(&self) -> serde_json::Value {
        let mut nested: BTreeMap<&str, BTreeMap<&str, BTreeMap<String, f64>>> = BTreeMap::new();
        for e in &self.entries {
            nested
                .entry(&e.variant)
                .or_default()
                .entry(&e.metric)
                .or_default()
                .insert(e.k.to_string(), e.value);
        }
        serde_json::json!({
            "seed": self.seed,
            "config_hash": self.config_hash,
            "revision": self.revision,
            "snips_k": self.snips_k,
            "n_cases": self.n_cases,
            "floored_propensities": self.floored_propensities,
            "metrics": nested,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let bad = |what: &str| Error::Parse { line: 0, message: format!("metrics JSON: missing {what}") };
        let mut entries = Vec::new();
        let metrics = value.get("metrics").and_then(|m| m.as_object()).ok_or_else(|| bad("metrics"))?;
        for (variant, by_metric) in metrics {
            for (metric, by_k) in by_metric.as_object().ok_or_else(|| bad("metric table"))? {
                for (k, v) in by_k.as_object().ok_or_else(|| bad("K table"))? {
                    entries.push(MetricEntry {
                        metric: metric.clone(),
                        k: k.parse().map_err(|_| bad("numeric K"))?,
                        variant: variant.clone(),
                        value: v.as_f64().ok_or_else(|| bad("value"))?,
                    });
                }
            }
        }
        entries.sort_by(|a, b| (&a.metric, a.k, &a.variant).cmp(&(&b.metric, b.k, &b.variant)));
        Ok(Self {
            seed: value.get("seed").and_then(|v| v.as_u64()).ok_or_else(|| bad("seed"))?,
            config_hash: value.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string(),
            revision: value.get("revision").and_then(|v| v.as_str()).unwrap_or_default().to_string(),
            snips_k: value.get("snips_k").and_then(|v| v.as_f64()).ok_or_else(|| bad("snips_k"))?,
            n_cases: value.get("n_cases").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            floored_propensities: value.get("floored_propensities").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            entries,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,variant,value\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.metric, e.k, e.variant, e.value));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Vec<MetricEntry>> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let err = |m: &str| Error::Parse { line: i + 1, message: m.to_string() };
            if fields.len() != 4 {
                return Err(err("expected 4 fields"));
            }
            rows.push(MetricEntry {
                metric: fields[0].to_string(),
                k: fields[1].parse().map_err(|_| err("bad K"))?,
                variant: fields[2].to_string(),
                value: fields[3].parse().map_err(|_| err("bad value"))?,
            });
        }
        Ok(rows)
    }
}

/// Naive and SNIPS Recall/NDCG plus coverage for every K. Propensities of
/// the targets come from `eval_sim`, which must not have seen the
/// exposure-simulator training data.
pub fn evaluate(
    scorer: &dyn Scorer,
    cases: &[TestCase],
    eval_sim: &ExposureSimulator,
    ks: &[usize],
    snips_k: f64,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut ranked = Vec::with_capacity(cases.len());
    let mut rho = Vec::with_capacity(cases.len());
    for case in cases {
        ranked.push(RankedTarget { ranking: rank_items(scorer, &case.prefix)?, target: case.target });
        rho.push(eval_sim.exposure_distribution(&case.prefix)?.0[case.target]);
    }
    let rankings: Vec<Vec<usize>> = ranked.iter().map(|r| r.ranking.clone()).collect();
    let mut entries = Vec::new();
    let mut floored = 0;
    for &k in ks {
        for kind in [MetricKind::Recall, MetricKind::Ndcg] {
            let naive = snips_evaluate(&ranked, &rho, 0.0, k, kind)?;
            let snips = snips_evaluate(&ranked, &rho, snips_k, k, kind)?;
            floored = floored.max(snips.floored);
            entries.push(MetricEntry { metric: kind.name().into(), k, variant: "naive".into(), value: naive.value });
            entries.push(MetricEntry { metric: kind.name().into(), k, variant: "snips".into(), value: snips.value });
        }
        entries.push(MetricEntry {
            metric: "coverage".into(),
            k,
            variant: "naive".into(),
            value: coverage(&rankings, k, scorer.n_items()),
        });
    }
    entries.sort_by(|a, b| (&a.metric, a.k, &a.variant).cmp(&(&b.metric, b.k, &b.variant)));
    Ok(MetricsReport {
        seed: 0,
        config_hash: String::new(),
        revision: String::new(),
        snips_k,
        n_cases: cases.len(),
        floored_propensities: floored,
        entries,
    })
}
