//! Trainable sequential scorers and their hand-written reverse passes.
//!
//! Both encoders consume only the real (non-pad) items of a sequence, so pad
//! invariance holds by construction: the recurrent encoder carries its zero
//! initial state through leading pads, and the attention encoder numbers
//! positions from the first real item and never attends to pads.
//!
//! A [`Model`] owns an item embedding table, the encoder weights and two
//! prediction heads. The main head produces the ranking logits; the DRO head is
//! a separate final layer sharing everything else.

mod adam;
mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod gru;
mod loss;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::AttentionWeights;
pub use gru::GruWeights;
pub use loss::{bce_loss, log_sigmoid, sigmoid, BceObjective, PositiveLoss, SequenceExample, Step};
pub(crate) use loss::{bce_terms, check_example, softplus};

use crate::error::{Error, Result};

/// Appendix defaults shared by every model in the toolkit.
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_LR: f64 = 0.005;
pub const DEFAULT_CLICK_LEN: usize = 50;
pub const DEFAULT_EXPOSURE_LEN: usize = 200;
pub const ATTENTION_HEADS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Recurrent,
    Attention,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" | "gru" => Ok(Architecture::Recurrent),
            "attention" | "sasrec" => Ok(Architecture::Attention),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Recurrent => "recurrent",
            Architecture::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub n_items: usize,
    pub dim: usize,
    /// Longest input sequence; also the size of the positional table.
    pub max_len: usize,
    /// Hidden width of the attention block's feed-forward layer.
    pub ffn_dim: usize,
}

impl ModelConfig {
    pub fn new(arch: Architecture, n_items: usize, dim: usize, max_len: usize) -> Self {
        Self { arch, n_items, dim, max_len, ffn_dim: dim }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Main,
    Dro,
}

/// Affine map applied to an encoder state before the dot product with item
/// embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Head {
    fn zeros(dim: usize) -> Self {
        Self { weight: Array2::zeros((dim, dim)), bias: Array2::zeros((1, dim)) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { weight: Array2::eye(dim), bias: Array2::zeros((1, dim)) }
    }

    pub fn apply(&self, states: &Array2<f64>) -> Array2<f64> {
        states.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `states`.
    fn backward(&self, states: &Array2<f64>, d_out: &Array2<f64>, grad: &mut Head) -> Array2<f64> {
        grad.weight += &states.t().dot(d_out);
        grad.bias += &d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        d_out.dot(&self.weight.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderWeights {
    Recurrent(GruWeights),
    Attention(AttentionWeights),
}

/// Every trainable tensor of a model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub item_emb: Array2<f64>,
    pub encoder: EncoderWeights,
    pub main_head: Head,
    pub dro_head: Head,
}

impl EncoderParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let encoder = match config.arch {
            Architecture::Recurrent => EncoderWeights::Recurrent(GruWeights::zeros(config.dim)),
            Architecture::Attention => EncoderWeights::Attention(AttentionWeights::zeros(
                config.dim,
                config.max_len,
                config.ffn_dim,
            )),
        };
        Self {
            item_emb: Array2::zeros((config.n_items, config.dim)),
            encoder,
            main_head: Head::zeros(config.dim),
            dro_head: Head::zeros(config.dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|(_, t)| t.fill(0.0));
        out
    }

    /// Named tensors in a fixed order (embeddings, encoder, main head, DRO head).
    pub fn tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        let mut out = vec![("item_emb", &self.item_emb)];
        match &self.encoder {
            EncoderWeights::Recurrent(w) => out.extend(w.tensors()),
            EncoderWeights::Attention(w) => out.extend(w.tensors()),
        }
        out.push(("main_head.weight", &self.main_head.weight));
        out.push(("main_head.bias", &self.main_head.bias));
        out.push(("dro_head.weight", &self.dro_head.weight));
        out.push(("dro_head.bias", &self.dro_head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        let mut out = vec![("item_emb", &mut self.item_emb)];
        match &mut self.encoder {
            EncoderWeights::Recurrent(w) => out.extend(w.tensors_mut()),
            EncoderWeights::Attention(w) => out.extend(w.tensors_mut()),
        }
        out.push(("main_head.weight", &mut self.main_head.weight));
        out.push(("main_head.bias", &mut self.main_head.bias));
        out.push(("dro_head.weight", &mut self.dro_head.weight));
        out.push(("dro_head.bias", &mut self.dro_head.bias));
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += factor * other`, tensor by tensor.
    pub fn scaled_add(&mut self, factor: f64, other: &EncoderParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(factor, b);
        }
    }

    pub fn head(&self, kind: HeadKind) -> &Head {
        match kind {
            HeadKind::Main => &self.main_head,
            HeadKind::Dro => &self.dro_head,
        }
    }

    pub fn head_mut(&mut self, kind: HeadKind) -> &mut Head {
        match kind {
            HeadKind::Main => &mut self.main_head,
            HeadKind::Dro => &mut self.dro_head,
        }
    }
}

/// Cached activations of one forward pass over the real items of a sequence.
#[derive(Debug, Clone)]
pub struct Forward {
    items: Vec<usize>,
    /// Encoder output at every position (T x d).
    pub states: Array2<f64>,
    cache: ForwardCache,
}

#[derive(Debug, Clone)]
enum ForwardCache {
    Recurrent(gru::GruCache),
    Attention(attention::AttentionCache),
}

impl Forward {
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn last_state(&self) -> HiddenState {
        HiddenState(self.states.row(self.states.nrows() - 1).to_owned())
    }
}

/// Encoder output at the last real position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Array1<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: EncoderParams,
}

impl Model {
    /// Uniform(-0.1, 0.1) initialisation of every tensor, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = EncoderParams::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in params.tensors_mut() {
            t.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        Self { config, params }
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }

    pub fn pad(&self) -> usize {
        self.config.n_items
    }

    fn check_items(&self, items: &[usize]) -> Result<()> {
        if items.is_empty() {
            return Err(Error::EmptySequence);
        }
        if items.len() > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence of {} real items exceeds max_len {}",
                items.len(),
                self.config.max_len
            )));
        }
        match items.iter().find(|&&i| i >= self.config.n_items) {
            Some(&bad) => Err(Error::UnknownItem(bad)),
            None => Ok(()),
        }
    }

    /// Runs the encoder over real items (no pads), keeping activations for the
    /// reverse pass. Row `p` of the result is the state after item `p`.
    pub fn forward(&self, items: &[usize]) -> Result<Forward> {
        self.check_items(items)?;
        let (states, cache) = match &self.params.encoder {
            EncoderWeights::Recurrent(w) => {
                let (h, c) = gru::forward(w, &self.params.item_emb, items);
                (h, ForwardCache::Recurrent(c))
            }
            EncoderWeights::Attention(w) => {
                let (h, c) = attention::forward(w, &self.params.item_emb, items);
                (h, ForwardCache::Attention(c))
            }
        };
        Ok(Forward { items: items.to_vec(), states, cache })
    }

    /// Propagates `d_states` (T x d) back into `grads`.
    pub fn backward(&self, fwd: &Forward, d_states: &Array2<f64>, grads: &mut EncoderParams) {
        match (&self.params.encoder, &fwd.cache, &mut grads.encoder) {
            (EncoderWeights::Recurrent(w), ForwardCache::Recurrent(c), EncoderWeights::Recurrent(g)) => {
                gru::backward(w, c, d_states, g, &mut grads.item_emb, &fwd.items)
            }
            (EncoderWeights::Attention(w), ForwardCache::Attention(c), EncoderWeights::Attention(g)) => {
                attention::backward(w, c, d_states, g, &mut grads.item_emb, &fwd.items)
            }
            _ => panic!("gradient container does not match the model architecture"),
        }
    }

    /// Encodes a padded sequence (as produced by `truncate_pad`).
    pub fn encode(&self, seq: &[usize]) -> Result<HiddenState> {
        let items = self.strip_pads(seq);
        Ok(self.forward(&items)?.last_state())
    }

    fn strip_pads(&self, seq: &[usize]) -> Vec<usize> {
        seq.iter().copied().filter(|&i| i != self.pad()).collect()
    }

    /// `e_item . head(state)`.
    pub fn score(&self, state: &HiddenState, item: usize, head: HeadKind) -> Result<f64> {
        if item == self.pad() {
            return Err(Error::PadItem);
        }
        if item > self.pad() {
            return Err(Error::UnknownItem(item));
        }
        let projected = self.project(state.0.view(), head);
        Ok(self.params.item_emb.row(item).dot(&projected))
    }

    fn project(&self, state: ArrayView1<f64>, head: HeadKind) -> Array1<f64> {
        let h = self.params.head(head);
        state.dot(&h.weight) + &h.bias.row(0)
    }

    /// Logits of every catalog item for one state.
    pub fn all_logits(&self, state: &HiddenState, head: HeadKind) -> Array1<f64> {
        let projected = self.project(state.0.view(), head);
        self.params.item_emb.dot(&projected)
    }

    /// Main-head logits over the catalog given the most recent `max_len`
    /// items of `prefix`.
    pub fn prefix_logits(&self, prefix: &[usize]) -> Result<Array1<f64>> {
        let items = self.strip_pads(prefix);
        let start = items.len().saturating_sub(self.config.max_len);
        let fwd = self.forward(&items[start..])?;
        Ok(self.all_logits(&fwd.last_state(), HeadKind::Main))
    }

    /// Projected states through `head` for every position (T x d).
    pub fn head_outputs(&self, fwd: &Forward, head: HeadKind) -> Array2<f64> {
        self.params.head(head).apply(&fwd.states)
    }

    /// Reverse pass through a head: accumulates head gradients, returns
    /// `dL/dstates`.
    pub fn head_backward(
        &self,
        fwd: &Forward,
        head: HeadKind,
        d_out: &Array2<f64>,
        grads: &mut EncoderParams,
    ) -> Array2<f64> {
        self.params.head(head).backward(&fwd.states, d_out, grads.head_mut(head))
    }
}

/// Anything that can score the full catalog given an interaction prefix.
pub trait Scorer {
    fn n_items(&self) -> usize;
    /// Logits (higher is better) for every item given a non-empty prefix of
    /// real items.
    fn item_logits(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn n_items(&self) -> usize {
        self.config.n_items
    }

    fn item_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.prefix_logits(prefix)?.to_vec())
    }
}

/// Scores every item by a fixed popularity value, ignoring the prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityScorer {
    pub scores: Vec<f64>,
}

impl Scorer for PopularityScorer {
    fn n_items(&self) -> usize {
        self.scores.len()
    }

    fn item_logits(&self, _prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.scores.clone())
    }
}

/// A differentiable training objective evaluated at a model's parameters.
pub trait Objective {
    /// Returns the loss and adds `dloss/dparams` into `grads`.
    fn loss_and_grad(&self, model: &Model, grads: &mut EncoderParams) -> Result<f64>;

    fn loss(&self, model: &Model) -> Result<f64> {
        let mut scratch = model.params.zeros_like();
        self.loss_and_grad(model, &mut scratch)
    }
}

/// Exact analytic gradient of `objective` at the model's parameters.
pub fn gradient(model: &Model, objective: &dyn Objective) -> Result<EncoderParams> {
    let mut grads = model.params.zeros_like();
    let loss = objective.loss_and_grad(model, &mut grads)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    Ok(grads)
}

/// `factor * inner`, with the gradient scaled the same way.
pub struct Scaled<'a> {
    pub inner: &'a dyn Objective,
    pub factor: f64,
}

impl Objective for Scaled<'_> {
    fn loss_and_grad(&self, model: &Model, grads: &mut EncoderParams) -> Result<f64> {
        let mut own = model.params.zeros_like();
        let loss = self.inner.loss_and_grad(model, &mut own)?;
        grads.scaled_add(self.factor, &own);
        Ok(self.factor * loss)
    }
}

/// A loss that does not depend on the parameters.
pub struct Constant(pub f64);

impl Objective for Constant {
    fn loss_and_grad(&self, _model: &Model, _grads: &mut EncoderParams) -> Result<f64> {
        Ok(self.0)
    }
}
