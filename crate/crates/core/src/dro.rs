//! Closed-form KL-DRO over the simulated exposure distribution.
//!
//! For a training step with prefix `S` and positive `v+`, every catalog item
//! gets a surrogate risk from the dro head (`1 - y` for the positive, `y` for
//! the rest) and the step contributes `log E_{q0}[exp(risk)]`. The joint
//! objective adds `a` times the sum of these terms to the BCE loss.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoders::{sigmoid, EncoderParams, Model, Objective, SequenceExample};
use crate::error::{Error, Result};
use crate::exposure::{ExposureDistribution, ExposureSimulator};
use crate::trainer::{example_loss_and_grad, train, Method, TrainReport, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroConfig {
    pub a: f64,
    /// Dual temperature; the closed form is only implemented for 1.
    pub alpha: f64,
}

impl DroConfig {
    pub fn new(a: f64) -> Result<Self> {
        let cfg = Self { a, alpha: 1.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(Error::Domain(format!("a = {} must be finite and non-negative", self.a)));
        }
        if self.alpha != 1.0 {
            return Err(Error::Config(format!("alpha = {} is unsupported; only 1 is implemented", self.alpha)));
        }
        Ok(())
    }
}

/// Per-item surrogate risks for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEvaluation(pub Vec<f64>);

pub fn surrogate_risk(y: f64, is_positive: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::Domain(format!("score {y} outside [0, 1]")));
    }
    Ok(if is_positive { 1.0 - y } else { y })
}

/// Risks of every item given dro-head probabilities `y` and the positive.
pub fn step_risks(y: &[f64], positive: usize) -> Result<RiskEvaluation> {
    if positive >= y.len() {
        return Err(Error::UnknownItem(positive));
    }
    y.iter()
        .enumerate()
        .map(|(v, &yv)| surrogate_risk(yv, v == positive))
        .collect::<Result<_>>()
        .map(RiskEvaluation)
}

/// `log sum q0 e^risk` and the tilted weights `q0 e^risk / sum`, shifted by the
/// largest risk on the support.
fn log_mean_exp<'a>(q0: impl Iterator<Item = &'a f64> + Clone, risks: &[f64]) -> (f64, Vec<f64>) {
    let max = q0
        .clone()
        .zip(risks)
        .filter(|(&q, _)| q > 0.0)
        .map(|(_, &r)| r)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = q0.zip(risks).map(|(&q, &r)| if q > 0.0 { q * (r - max).exp() } else { 0.0 }).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    (max + sum.ln(), weights)
}

/// `log E_{q0}[e^risk]`.
pub fn dro_loss(q0: &ExposureDistribution, risks: &RiskEvaluation) -> Result<f64> {
    if q0.0.len() != risks.0.len() {
        return Err(Error::Shape(format!("q0 has {} items, risks have {}", q0.0.len(), risks.0.len())));
    }
    if q0.0.iter().any(|&q| !(q >= 0.0)) || !q0.0.iter().any(|&q| q > 0.0) {
        return Err(Error::Domain("q0 must be non-negative with non-empty support".into()));
    }
    Ok(log_mean_exp(q0.0.iter(), &risks.0).0)
}

pub fn joint_loss(rec_loss: f64, dro_terms: &[f64], a: f64) -> f64 {
    if a == 0.0 {
        return rec_loss;
    }
    rec_loss + a * dro_terms.iter().sum::<f64>()
}

/// DRO terms of every step of `example`, with their gradient scaled by `a`.
///
/// `dro_out` holds dro-head outputs per position and `q0` the exposure
/// distribution per position. Gradients w.r.t. `dro_out` go to `d_dro_out`,
/// item-embedding gradients straight into `grads`. Returns the unweighted sum.
pub(crate) fn dro_step_terms(
    model: &Model,
    example: &SequenceExample,
    dro_out: &Array2<f64>,
    q0: &Array2<f64>,
    a: f64,
    d_dro_out: &mut Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<f64> {
    let emb = &model.params.item_emb;
    if q0.ncols() != emb.nrows() || q0.nrows() < dro_out.nrows() {
        return Err(Error::Shape(format!("q0 of shape {:?} for {} positions", q0.dim(), dro_out.nrows())));
    }
    let positions: Vec<usize> = example.steps.iter().map(|s| s.position).collect();
    let g = dro_out.select(Axis(0), &positions);
    let logits = g.dot(&emb.t());
    let mut d_logits = Array2::<f64>::zeros(logits.raw_dim());
    let mut total = 0.0;
    let mut risks = vec![0.0; emb.nrows()];
    for (s, step) in example.steps.iter().enumerate() {
        let y: Vec<f64> = logits.row(s).iter().map(|&x| sigmoid(x)).collect();
        for (v, r) in risks.iter_mut().enumerate() {
            *r = if v == step.positive { 1.0 - y[v] } else { y[v] };
        }
        let (value, weights) = log_mean_exp(q0.row(step.position).iter(), &risks);
        total += value;
        for (v, d) in d_logits.row_mut(s).iter_mut().enumerate() {
            let d_risk = a * weights[v];
            let d_y = if v == step.positive { -d_risk } else { d_risk };
            *d = d_y * y[v] * (1.0 - y[v]);
        }
    }
    let d_g = d_logits.dot(emb);
    for (s, &p) in positions.iter().enumerate() {
        let mut row = d_dro_out.row_mut(p);
        row += &d_g.row(s);
    }
    grads.item_emb += &d_logits.t().dot(&g);
    Ok(total)
}

/// The full joint objective over a fixed batch, for gradient checks.
pub struct JointObjective {
    pub examples: Vec<SequenceExample>,
    /// `q0` per position for each example.
    pub q0: Vec<Array2<f64>>,
    pub a: f64,
}

impl Objective for JointObjective {
    fn loss_and_grad(&self, model: &Model, grads: &mut EncoderParams) -> Result<f64> {
        if self.examples.len() != self.q0.len() {
            return Err(Error::Shape("one q0 matrix per example required".into()));
        }
        let method = Method::Dro { a: self.a };
        let mut rec = 0.0;
        let mut dro = Vec::with_capacity(self.examples.len());
        for (ex, q0) in self.examples.iter().zip(&self.q0) {
            let parts = example_loss_and_grad(model, ex, &method, None, Some(q0), grads)?;
            rec += parts.rec;
            dro.push(parts.dro);
        }
        Ok(joint_loss(rec, &dro, self.a))
    }
}

/// Joint BCE + DRO training against a frozen simulator.
pub fn train_dro(
    model: &mut Model,
    seqs: &[Vec<usize>],
    simulator: &ExposureSimulator,
    cfg: &DroConfig,
    settings: &TrainSettings,
) -> Result<TrainReport> {
    cfg.validate()?;
    train(model, seqs, &Method::Dro { a: cfg.a }, settings, Some(simulator))
}
