//! Binary cross-entropy over (prefix, positive, sampled negative) steps.

use ndarray::Array2;

use super::{EncoderParams, Forward, HeadKind, Model, Objective};
use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln s(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// One prediction step: the state at `position` should score `positive`
/// above the sampled `negative`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub position: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Real input items and the prediction steps read off their prefix states.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub inputs: Vec<usize>,
    pub steps: Vec<Step>,
}

impl SequenceExample {
    /// Next-item steps at every position: `targets[p]` follows `inputs[..=p]`.
    pub fn window(inputs: Vec<usize>, targets: Vec<usize>, negatives: Vec<usize>) -> Self {
        assert_eq!(inputs.len(), targets.len());
        assert_eq!(inputs.len(), negatives.len());
        let steps = targets
            .into_iter()
            .zip(negatives)
            .enumerate()
            .map(|(position, (positive, negative))| Step { position, positive, negative })
            .collect();
        Self { inputs, steps }
    }

    /// A single step predicting `positive` after the whole prefix.
    pub fn single(prefix: Vec<usize>, positive: usize, negative: usize) -> Self {
        let position = prefix.len() - 1;
        Self { inputs: prefix, steps: vec![Step { position, positive, negative }] }
    }
}

/// How the positive half of a step is penalised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositiveLoss {
    /// `-w ln s(r)`.
    Weighted(f64),
    /// `-[(1/p) ln s(r) + (1 - 1/p) ln(1 - s(r))]`, given `1/p`.
    Unbiased(f64),
}

/// Adds the BCE terms of `example` and their gradient w.r.t. the main-head
/// outputs `head_out` into `d_head_out`; item-embedding gradients go straight
/// into `grads`. Returns the summed loss.
pub(crate) fn bce_terms(
    model: &Model,
    example: &SequenceExample,
    head_out: &Array2<f64>,
    positive_loss: &dyn Fn(usize) -> PositiveLoss,
    d_head_out: &mut Array2<f64>,
    grads: &mut EncoderParams,
) -> f64 {
    let emb = &model.params.item_emb;
    let mut total = 0.0;
    for (s, step) in example.steps.iter().enumerate() {
        let g = head_out.row(step.position);
        let e_pos = emb.row(step.positive);
        let e_neg = emb.row(step.negative);
        let r_pos = g.dot(&e_pos);
        let r_neg = g.dot(&e_neg);
        let (loss_pos, d_pos) = match positive_loss(s) {
            PositiveLoss::Weighted(w) => (w * softplus(-r_pos), w * (sigmoid(r_pos) - 1.0)),
            PositiveLoss::Unbiased(inv) => (
                inv * softplus(-r_pos) + (1.0 - inv) * softplus(r_pos),
                sigmoid(r_pos) - inv,
            ),
        };
        let d_neg = sigmoid(r_neg);
        total += loss_pos + softplus(r_neg);

        let mut dg = d_head_out.row_mut(step.position);
        dg.scaled_add(d_pos, &e_pos);
        dg.scaled_add(d_neg, &e_neg);
        grads.item_emb.row_mut(step.positive).scaled_add(d_pos, &g);
        grads.item_emb.row_mut(step.negative).scaled_add(d_neg, &g);
    }
    total
}

pub(crate) fn check_example(model: &Model, example: &SequenceExample) -> Result<()> {
    for step in &example.steps {
        if step.position >= example.inputs.len() {
            return Err(Error::Shape(format!(
                "step position {} beyond {} inputs",
                step.position,
                example.inputs.len()
            )));
        }
        for item in [step.positive, step.negative] {
            if item >= model.n_items() {
                return Err(if item == model.pad() { Error::PadItem } else { Error::UnknownItem(item) });
            }
        }
    }
    Ok(())
}

/// Main-head BCE summed over every step of every example.
#[derive(Debug, Clone)]
pub struct BceObjective {
    pub examples: Vec<SequenceExample>,
}

impl Objective for BceObjective {
    fn loss_and_grad(&self, model: &Model, grads: &mut EncoderParams) -> Result<f64> {
        if self.examples.iter().all(|e| e.steps.is_empty()) {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for ex in &self.examples {
            check_example(model, ex)?;
            let fwd: Forward = model.forward(&ex.inputs)?;
            let head_out = model.head_outputs(&fwd, HeadKind::Main);
            let mut d_out = Array2::zeros(head_out.raw_dim());
            total += bce_terms(model, ex, &head_out, &|_| PositiveLoss::Weighted(1.0), &mut d_out, grads);
            let d_states = model.head_backward(&fwd, HeadKind::Main, &d_out, grads);
            model.backward(&fwd, &d_states, grads);
        }
        Ok(total)
    }
}

/// `-sum [ln s(r+) + ln(1 - s(r-))]` over the batch, using main-head logits.
pub fn bce_loss(model: &Model, batch: &[SequenceExample]) -> Result<f64> {
    BceObjective { examples: batch.to_vec() }.loss(model)
}
