//! Propensity-based debiasing baselines with sequential propensities
//! `p(v | S) = q0(S, v)` from the frozen exposure simulator.

use std::collections::HashMap;

use crate::encoders::{softplus, Model};
use crate::error::{Error, Result};
use crate::exposure::ExposureSimulator;
use crate::trainer::{train, window, ExposureSource, Method, TrainReport, TrainSettings};

fn check_propensity(rho: f64) -> Result<()> {
    if rho > 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("propensity {rho} must be positive")))
    }
}

pub fn ips_weight(rho: f64) -> Result<f64> {
    check_propensity(rho)?;
    Ok(ips_weight_unchecked(rho))
}

pub fn ips_clipped_weight(rho: f64, clip: f64) -> Result<f64> {
    check_propensity(rho)?;
    check_propensity(clip)?;
    Ok(ips_clipped_weight_unchecked(rho, clip))
}

pub(crate) fn ips_weight_unchecked(rho: f64) -> f64 {
    1.0 / rho
}

pub(crate) fn ips_clipped_weight_unchecked(rho: f64, clip: f64) -> f64 {
    (1.0 / rho).min(1.0 / clip)
}

/// Unbiased pointwise loss given `sigma = s(r)`: the positive term is
/// corrected by `1/rho`, unclicked pairs keep the plain negative term.
pub fn relmf_loss(sigma: f64, rho: f64, is_clicked: bool) -> Result<f64> {
    check_propensity(rho)?;
    if rho > 1.0 {
        return Err(Error::Domain(format!("propensity {rho} exceeds 1")));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!("probability {sigma} outside [0, 1]")));
    }
    let inv = 1.0 / rho;
    Ok(if is_clicked {
        -(inv * sigma.ln() + (1.0 - inv) * (1.0 - sigma).ln())
    } else {
        -(1.0 - sigma).ln()
    })
}

/// Logit form of [`relmf_loss`] for clicked pairs, stable for large `|r|`.
pub fn relmf_positive_from_logit(r: f64, rho: f64) -> Result<f64> {
    check_propensity(rho)?;
    let inv = 1.0 / rho;
    Ok(inv * softplus(-r) + (1.0 - inv) * softplus(r))
}

/// Memoised propensity lookups on a frozen simulator, keyed by prefix.
pub struct PropensityProvider<'a> {
    simulator: &'a ExposureSimulator,
    cache: HashMap<Vec<usize>, Vec<f64>>,
}

impl<'a> PropensityProvider<'a> {
    pub fn new(simulator: &'a ExposureSimulator) -> Self {
        Self { simulator, cache: HashMap::new() }
    }

    pub fn distribution(&mut self, prefix: &[usize]) -> Result<&[f64]> {
        let key = prefix[prefix.len().saturating_sub(self.simulator.click_len())..].to_vec();
        if !self.cache.contains_key(&key) {
            let q = self.simulator.exposure_distribution(&key)?.0;
            self.cache.insert(key.clone(), q);
        }
        Ok(&self.cache[&key])
    }

    pub fn propensity(&mut self, prefix: &[usize], item: usize) -> Result<f64> {
        let n = self.simulator.n_items();
        if item >= n {
            return Err(if item == n { Error::PadItem } else { Error::UnknownItem(item) });
        }
        Ok(self.distribution(prefix)?[item])
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }
}

/// Median over items of the marginal exposure probability, where the
/// marginal averages `q0` over every training prefix of the given windows.
pub fn median_exposure_probability(
    source: &dyn ExposureSource,
    seqs: &[Vec<usize>],
    max_len: usize,
) -> Result<f64> {
    let n = source.n_items();
    let mut marginal = vec![0.0; n];
    let mut count = 0usize;
    for w in seqs.iter().filter_map(|s| window(s, max_len)) {
        let q = source.distributions_along(&w.inputs)?;
        for row in q.rows() {
            for (m, &p) in marginal.iter_mut().zip(row) {
                *m += p;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    marginal.iter_mut().for_each(|m| *m /= count as f64);
    Ok(median(&mut marginal))
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Ips,
    IpsClipped,
    RelMf,
}

/// Trains `model` with one of the propensity baselines. The IPS-C clip is
/// recomputed from `source` on the training windows.
pub fn train_baseline(
    model: &mut Model,
    seqs: &[Vec<usize>],
    source: &dyn ExposureSource,
    baseline: Baseline,
    settings: &TrainSettings,
) -> Result<TrainReport> {
    let method = match baseline {
        Baseline::Ips => Method::Ips,
        Baseline::RelMf => Method::RelMf,
        Baseline::IpsClipped => {
            Method::IpsClipped { clip: median_exposure_probability(source, seqs, settings.max_len)? }
        }
    };
    train(model, seqs, &method, settings, Some(source))
}
