//! First-order log-linear autoregressive model over image tokens.
//!
//! The logit for image token `v` at step `t` is
//!
//! ```text
//! logit_t[v] = (t == 1 ? bos_row[v] : W_prev[q_{t-1}][v]) + sum_j W_cond[c_j][v] + b[v]
//! ```
//!
//! where `<drop>` prompt tokens contribute nothing. Given the prompt the model
//! is a Markov chain of order one, so sequence likelihoods, gradients and
//! expected concept frequencies are all exact.

mod params;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::synthworld::{ConceptSpec, GridImage, ImageToken, Prompt};

pub use params::{ModelParams, ParamBlock, ParamShape};

/// Temperatures below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn new(temperature: f64, seed: u64) -> Result<GenerationConfig> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(
                "GenerationConfig.temperature",
                format!("{temperature} is not a positive real"),
            ));
        }
        Ok(GenerationConfig { temperature, seed })
    }

    pub fn with_seed(self, seed: u64) -> GenerationConfig {
        GenerationConfig { seed, ..self }
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Anything that produces next-token logits from the previous image token.
pub trait NextTokenModel {
    fn image_vocab_size(&self) -> usize;
    fn seq_len(&self) -> usize;
    /// Writes logits for the next token into `out` (length `image_vocab_size`).
    fn next_logits(&self, prev: Option<ImageToken>, out: &mut [f64]);
}

/// A parameter set with a fixed prompt: the prompt and bias terms are folded
/// into one offset vector so each step costs `O(V)`.
#[derive(Debug, Clone)]
pub struct ConditionedModel<'a> {
    params: &'a ModelParams,
    offset: Vec<f64>,
}

impl<'a> ConditionedModel<'a> {
    pub fn new(params: &'a ModelParams, prompt: &Prompt) -> ConditionedModel<'a> {
        ConditionedModel {
            params,
            offset: prompt_offset(params, prompt),
        }
    }

    /// Wraps a precomputed offset (bias plus conditioning).
    pub fn with_offset(params: &'a ModelParams, offset: Vec<f64>) -> ConditionedModel<'a> {
        assert_eq!(offset.len(), params.shape().image_vocab_size);
        ConditionedModel { params, offset }
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }
}

impl NextTokenModel for ConditionedModel<'_> {
    fn image_vocab_size(&self) -> usize {
        self.params.shape().image_vocab_size
    }

    fn seq_len(&self) -> usize {
        self.params.shape().seq_len
    }

    fn next_logits(&self, prev: Option<ImageToken>, out: &mut [f64]) {
        let row = match prev {
            Some(u) => self.params.prev_row(u),
            None => self.params.bos_row(),
        };
        for ((o, r), c) in out.iter_mut().zip(row).zip(&self.offset) {
            *o = r + c;
        }
    }
}

/// `sum_j W_cond[prompt_j] + b`, skipping `<drop>`.
pub fn prompt_offset(params: &ModelParams, prompt: &Prompt) -> Vec<f64> {
    let drop = params.shape().drop_token;
    let mut offset = vec![0.0; params.shape().image_vocab_size];
    for &c in prompt.tokens().iter().filter(|&&c| c != drop) {
        for (o, w) in offset.iter_mut().zip(params.cond_row(c)) {
            *o += w;
        }
    }
    for (o, b) in offset.iter_mut().zip(params.bias()) {
        *o += b;
    }
    offset
}

pub fn logits(params: &ModelParams, prev: Option<ImageToken>, prompt: &Prompt) -> Vec<f64> {
    let mut out = vec![0.0; params.shape().image_vocab_size];
    ConditionedModel::new(params, prompt).next_logits(prev, &mut out);
    out
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of `logits` written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(logits);
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - lse).exp();
    }
}

pub fn seq_log_prob(params: &ModelParams, image: &GridImage, prompt: &Prompt) -> f64 {
    model_log_prob(&ConditionedModel::new(params, prompt), image)
}

/// Log-likelihood of `image` under any next-token model.
pub fn model_log_prob<M: NextTokenModel>(model: &M, image: &GridImage) -> f64 {
    let mut buf = vec![0.0; model.image_vocab_size()];
    let mut prev = None;
    let mut total = 0.0;
    for &q in image.tokens() {
        model.next_logits(prev, &mut buf);
        total += buf[q as usize] - log_sum_exp(&buf);
        prev = Some(q);
    }
    total
}

/// Adds `scale * d log p(image | prompt) / d params` into `grad` and returns
/// the log-likelihood.
pub fn accumulate_seq_log_prob_grad(
    params: &ModelParams,
    image: &GridImage,
    prompt: &Prompt,
    scale: f64,
    grad: &mut ModelParams,
) -> f64 {
    let model = ConditionedModel::new(params, prompt);
    let v = params.shape().image_vocab_size;
    let drop = params.shape().drop_token;
    let mut logit = vec![0.0; v];
    // d log p(q_t) / d logit_t = onehot(q_t) - softmax(logit_t), summed over
    // steps per source row. Every step touches the bias and prompt rows.
    let mut shared = vec![0.0; v];
    let mut step = vec![0.0; v];
    let mut prev: Option<ImageToken> = None;
    let mut total = 0.0;
    for &q in image.tokens() {
        model.next_logits(prev, &mut logit);
        let lse = log_sum_exp(&logit);
        total += logit[q as usize] - lse;
        for (s, l) in step.iter_mut().zip(&logit) {
            *s = -(l - lse).exp();
        }
        step[q as usize] += 1.0;
        let row = match prev {
            Some(u) => grad.prev_row_mut(u),
            None => grad.bos_row_mut(),
        };
        for (r, s) in row.iter_mut().zip(&step) {
            *r += scale * s;
        }
        for (a, s) in shared.iter_mut().zip(&step) {
            *a += s;
        }
        prev = Some(q);
    }
    for (g, s) in grad.bias_mut().iter_mut().zip(&shared) {
        *g += scale * s;
    }
    for &c in prompt.tokens().iter().filter(|&&c| c != drop) {
        for (g, s) in grad.cond_row_mut(c).iter_mut().zip(&shared) {
            *g += scale * s;
        }
    }
    total
}

pub fn grad_seq_log_prob(params: &ModelParams, image: &GridImage, prompt: &Prompt) -> ModelParams {
    let mut grad = ModelParams::zeros(*params.shape());
    accumulate_seq_log_prob_grad(params, image, prompt, 1.0, &mut grad);
    grad
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Left-to-right ancestral sampling from `softmax(logits / temperature)`.
pub fn sample_model<M: NextTokenModel>(model: &M, cfg: &GenerationConfig) -> GridImage {
    let v = model.image_vocab_size();
    let mut r = rng::stream(cfg.seed);
    let mut logit = vec![0.0; v];
    let mut probs = vec![0.0; v];
    let mut prev = None;
    let mut tokens = Vec::with_capacity(model.seq_len());
    for _ in 0..model.seq_len() {
        model.next_logits(prev, &mut logit);
        let q = if cfg.temperature < GREEDY_TEMPERATURE {
            argmax(&logit)
        } else {
            if cfg.temperature != 1.0 {
                logit.iter_mut().for_each(|l| *l /= cfg.temperature);
            }
            softmax_into(&logit, &mut probs);
            let u: f64 = r.gen();
            let mut acc = 0.0;
            let mut pick = v - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        tokens.push(q as ImageToken);
        prev = Some(q as ImageToken);
    }
    GridImage(tokens)
}

pub fn sample(params: &ModelParams, prompt: &Prompt, cfg: &GenerationConfig) -> GridImage {
    sample_model(&ConditionedModel::new(params, prompt), cfg)
}

pub fn greedy_decode<M: NextTokenModel>(model: &M) -> GridImage {
    let v = model.image_vocab_size();
    let mut logit = vec![0.0; v];
    let mut prev = None;
    let mut tokens = Vec::with_capacity(model.seq_len());
    for _ in 0..model.seq_len() {
        model.next_logits(prev, &mut logit);
        let q = argmax(&logit) as ImageToken;
        tokens.push(q);
        prev = Some(q);
    }
    GridImage(tokens)
}

/// Per-position marginals `P(q_t = v)` by forward propagation of the
/// previous-token distribution. Costs `O(L * V^2)`.
pub fn token_marginals<M: NextTokenModel>(model: &M) -> Vec<Vec<f64>> {
    let v = model.image_vocab_size();
    let mut logit = vec![0.0; v];
    let mut probs = vec![0.0; v];
    // Row u of the transition matrix, computed once since the chain is homogeneous.
    let transitions: Vec<Vec<f64>> = (0..v)
        .map(|u| {
            model.next_logits(Some(u as ImageToken), &mut logit);
            softmax_into(&logit, &mut probs);
            probs.clone()
        })
        .collect();
    model.next_logits(None, &mut logit);
    let mut current = vec![0.0; v];
    softmax_into(&logit, &mut current);
    let mut out = Vec::with_capacity(model.seq_len());
    for t in 0..model.seq_len() {
        if t > 0 {
            let mut next = vec![0.0; v];
            for (u, mu) in current.iter().enumerate() {
                for (n, p) in next.iter_mut().zip(&transitions[u]) {
                    *n += mu * p;
                }
            }
            current = next;
        }
        out.push(current.clone());
    }
    out
}

/// Expected signature-token frequency of `concept` under the model's
/// distribution over images.
pub fn exact_concept_expectation<M: NextTokenModel>(model: &M, concept: &ConceptSpec) -> f64 {
    let marginals = token_marginals(model);
    let total: f64 = marginals
        .iter()
        .map(|m| {
            concept
                .signature_tokens
                .iter()
                .map(|&s| m[s as usize])
                .sum::<f64>()
        })
        .sum();
    total / marginals.len() as f64
}
