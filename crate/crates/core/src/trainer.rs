//! Shared mini-batch training loop for every objective: vanilla BCE, the
//! propensity baselines and the joint DRO loss.
//!
//! Each user contributes one window of their last `max_len + 1` clicks; every
//! position of the window is a next-item step with one uniformly sampled
//! negative. Negatives and the user order are redrawn every epoch from a single
//! seeded stream, so two runs that only differ in a zero-weighted term consume
//! exactly the same random numbers.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dro::dro_step_terms;
use crate::encoders::{
    adam_step, bce_terms, check_example, AdamConfig, AdamState, EncoderParams, HeadKind, Model,
    PositiveLoss, SequenceExample, DEFAULT_CLICK_LEN, DEFAULT_LR,
};
use crate::error::{Error, Result};
use crate::exposure::{ComponentSet, ExposureSimulator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Most recent clicks used as model input.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, lr: DEFAULT_LR, max_len: DEFAULT_CLICK_LEN, seed: 0 }
    }
}

/// Training objective selected by the `method` config key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Ips,
    IpsClipped { clip: f64 },
    RelMf,
    Dro { a: f64 },
}

impl Method {
    fn needs_propensity(&self) -> bool {
        matches!(self, Method::Ips | Method::IpsClipped { .. } | Method::RelMf)
    }

    fn dro_weight(&self) -> Option<f64> {
        match *self {
            Method::Dro { a } if a > 0.0 => Some(a),
            _ => None,
        }
    }
}

/// Supplies `q0(inputs[..=p], .)` for every position of a window.
pub trait ExposureSource {
    fn n_items(&self) -> usize;
    fn distributions_along(&self, inputs: &[usize]) -> Result<Array2<f64>>;
}

impl ExposureSource for ExposureSimulator {
    fn n_items(&self) -> usize {
        ExposureSimulator::n_items(self)
    }

    fn distributions_along(&self, inputs: &[usize]) -> Result<Array2<f64>> {
        ExposureSimulator::distributions_along(self, inputs, ComponentSet::ALL)
    }
}

/// Propensity one for every item; turns every baseline into vanilla BCE.
#[derive(Debug, Clone, Copy)]
pub struct UnitPropensity {
    pub n_items: usize,
}

impl ExposureSource for UnitPropensity {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn distributions_along(&self, inputs: &[usize]) -> Result<Array2<f64>> {
        Ok(Array2::ones((inputs.len(), self.n_items)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_dro: f64,
    pub l_joint: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch log serialises") + "\n")
            .collect()
    }
}

/// Inputs and targets of a user's most recent window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// The last `max_len + 1` items, shifted by one; `None` for sequences with
/// fewer than two items.
pub fn window(seq: &[usize], max_len: usize) -> Option<Window> {
    if seq.len() < 2 {
        return None;
    }
    let tail = &seq[seq.len().saturating_sub(max_len + 1)..];
    Some(Window { inputs: tail[..tail.len() - 1].to_vec(), targets: tail[1..].to_vec() })
}

/// Uniform negative from the catalog, never equal to `positive`.
pub fn sample_negative(rng: &mut impl Rng, n_items: usize, positive: usize) -> usize {
    let v = rng.random_range(0..n_items - 1);
    if v >= positive {
        v + 1
    } else {
        v
    }
}

/// Per-window exposure information fixed for the whole run.
enum Exposure {
    None,
    /// `q0(prefix, target)` per step.
    Propensity(Vec<Vec<f64>>),
    /// Full `q0` rows per step.
    Distribution(Vec<Array2<f64>>),
}

/// Loss components of one example.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub dro: f64,
}

/// Positive-term rule for `method` given the step propensity.
pub fn positive_loss(method: &Method, propensity: f64) -> PositiveLoss {
    match *method {
        Method::Ips => PositiveLoss::Weighted(crate::baselines::ips_weight_unchecked(propensity)),
        Method::IpsClipped { clip } => {
            PositiveLoss::Weighted(crate::baselines::ips_clipped_weight_unchecked(propensity, clip))
        }
        Method::RelMf => PositiveLoss::Unbiased(1.0 / propensity),
        Method::Vanilla | Method::Dro { .. } => PositiveLoss::Weighted(1.0),
    }
}

/// Loss of one example and its gradient added into `grads`.
pub(crate) fn example_loss_and_grad(
    model: &Model,
    example: &SequenceExample,
    method: &Method,
    propensities: Option<&[f64]>,
    q0: Option<&Array2<f64>>,
    grads: &mut EncoderParams,
) -> Result<LossParts> {
    check_example(model, example)?;
    let fwd = model.forward(&example.inputs)?;
    let main_out = model.head_outputs(&fwd, HeadKind::Main);
    let mut d_main = Array2::zeros(main_out.raw_dim());
    let rule = |s: usize| match propensities {
        Some(p) => positive_loss(method, p[s]),
        None => PositiveLoss::Weighted(1.0),
    };
    let rec = bce_terms(model, example, &main_out, &rule, &mut d_main, grads);
    let mut d_states = model.head_backward(&fwd, HeadKind::Main, &d_main, grads);

    let mut dro = 0.0;
    if let (Some(a), Some(q0)) = (method.dro_weight(), q0) {
        let dro_out = model.head_outputs(&fwd, HeadKind::Dro);
        let mut d_dro = Array2::zeros(dro_out.raw_dim());
        dro = dro_step_terms(model, example, &dro_out, q0, a, &mut d_dro, grads)?;
        d_states += &model.head_backward(&fwd, HeadKind::Dro, &d_dro, grads);
    }
    model.backward(&fwd, &d_states, grads);
    Ok(LossParts { rec, dro })
}

/// Trains `model` in place on the click sequences `seqs` (one per user).
///
/// `exposure` is required by every method except vanilla; DRO with `a = 0`
/// never touches it.
pub fn train(
    model: &mut Model,
    seqs: &[Vec<usize>],
    method: &Method,
    settings: &TrainSettings,
    exposure: Option<&dyn ExposureSource>,
) -> Result<TrainReport> {
    let mut log = TrainReport::default();
    train_with_log(model, seqs, method, settings, exposure, |e| log.epochs.push(e.clone()))?;
    Ok(log)
}

/// Like [`train`] but hands every epoch record to `on_epoch` as soon as it is
/// produced.
pub fn train_with_log(
    model: &mut Model,
    seqs: &[Vec<usize>],
    method: &Method,
    settings: &TrainSettings,
    exposure: Option<&dyn ExposureSource>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<()> {
    let n_items = model.n_items();
    if n_items < 2 {
        return Err(Error::Config("training needs at least two items".into()));
    }
    if settings.batch_size == 0 || settings.max_len == 0 {
        return Err(Error::Config("batch_size and max_len must be positive".into()));
    }
    if settings.max_len > model.config.max_len {
        return Err(Error::Config(format!(
            "training window {} exceeds model max_len {}",
            settings.max_len, model.config.max_len
        )));
    }
    if let Method::Dro { a } = method {
        if !(*a >= 0.0 && a.is_finite()) {
            return Err(Error::Domain(format!("DRO weight a = {a} must be finite and non-negative")));
        }
    }
    if let Method::IpsClipped { clip } = method {
        if !(*clip > 0.0) {
            return Err(Error::Domain(format!("clip {clip} must be positive")));
        }
    }

    let windows: Vec<Window> = seqs.iter().filter_map(|s| window(s, settings.max_len)).collect();
    if windows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let prepared = prepare_exposure(&windows, method, exposure, n_items)?;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adam = AdamState::new(&model.params);
    let adam_cfg = AdamConfig { lr: settings.lr, ..AdamConfig::default() };
    let a = method.dro_weight().unwrap_or(0.0);

    for epoch in 1..=settings.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        let (mut l_rec, mut l_dro) = (0.0, 0.0);
        for batch in order.chunks(settings.batch_size) {
            let mut grads = model.params.zeros_like();
            for &w in batch {
                let win = &windows[w];
                let negatives = win.targets.iter().map(|&t| sample_negative(&mut rng, n_items, t)).collect();
                let example = SequenceExample::window(win.inputs.clone(), win.targets.clone(), negatives);
                let (props, q0) = match &prepared {
                    Exposure::None => (None, None),
                    Exposure::Propensity(p) => (Some(p[w].as_slice()), None),
                    Exposure::Distribution(q) => (None, Some(&q[w])),
                };
                let parts = example_loss_and_grad(model, &example, method, props, q0, &mut grads)?;
                if !(parts.rec.is_finite() && parts.dro.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch}, window {w}: l_rec = {}, l_dro = {}, a = {a}",
                        parts.rec, parts.dro
                    )));
                }
                l_rec += parts.rec;
                l_dro += parts.dro;
            }
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}: non-finite gradient")));
            }
            adam_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;
        }
        on_epoch(&EpochLog {
            epoch,
            l_rec,
            l_dro,
            l_joint: l_rec + a * l_dro,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

fn prepare_exposure(
    windows: &[Window],
    method: &Method,
    exposure: Option<&dyn ExposureSource>,
    n_items: usize,
) -> Result<Exposure> {
    let needs_q0 = method.dro_weight().is_some();
    if !needs_q0 && !method.needs_propensity() {
        return Ok(Exposure::None);
    }
    let source = exposure.ok_or_else(|| Error::Config("method needs an exposure simulator".into()))?;
    if source.n_items() != n_items {
        return Err(Error::Shape("exposure source and model disagree on catalog size".into()));
    }
    if needs_q0 {
        let q = windows.iter().map(|w| source.distributions_along(&w.inputs)).collect::<Result<_>>()?;
        return Ok(Exposure::Distribution(q));
    }
    let mut props = Vec::with_capacity(windows.len());
    for w in windows {
        let q = source.distributions_along(&w.inputs)?;
        let p: Vec<f64> = w.targets.iter().enumerate().map(|(s, &t)| q[[s, t]]).collect();
        if let Some(bad) = p.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Domain(format!("propensity {bad} outside (0, 1]")));
        }
        props.push(p);
    }
    Ok(Exposure::Propensity(props))
}
