//! Training objectives.
//!
//! All losses return their value together with an analytic gradient shaped
//! like [`ModelParams`]. The DPO family shares one routine that takes a
//! per-sequence weight on the log-ratio: weight 1 gives the vanilla loss and
//! weight `1/|y|` gives the token-level average.

use serde::{Deserialize, Serialize};

use crate::armodel::{self, accumulate_seq_log_prob_grad, seq_log_prob, ModelParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthworld::{GridImage, ImageToken, PreferencePair, Prompt, Vocab};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_DROP_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub drop_prob: f64,
}

impl DpoConfig {
    pub fn new(beta: f64, drop_prob: f64) -> Result<DpoConfig> {
        let cfg = DpoConfig { beta, drop_prob };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(
                "DpoConfig.beta",
                format!("{} is not positive", self.beta),
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::invalid(
                "DpoConfig.drop_prob",
                format!("{} is outside [0, 1]", self.drop_prob),
            ));
        }
        Ok(())
    }
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: DEFAULT_BETA,
            drop_prob: DEFAULT_DROP_PROB,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Pre-sigmoid argument for the DPO family; `None` for likelihood losses.
    pub margin: Option<f64>,
    pub grad: ModelParams,
}

/// Replaces each prompt token by `<drop>` independently with probability
/// `drop_prob`. The draw for position `j` depends only on `(seed, j)`.
pub fn token_drop(vocab: &Vocab, prompt: &Prompt, drop_prob: f64, seed: u64) -> Prompt {
    Prompt(
        prompt
            .tokens()
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                if rng::unit(rng::mix(seed, j as u64)) < drop_prob {
                    vocab.drop_token
                } else {
                    t
                }
            })
            .collect(),
    )
}

/// `-log(sigmoid(x))` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean per-token negative log-likelihood, `-log p(image | prompt) / L`.
pub fn ce_loss(params: &ModelParams, image: &GridImage, prompt: &Prompt) -> LossValue {
    let scale = -1.0 / image.len() as f64;
    let mut grad = ModelParams::zeros(*params.shape());
    let lp = accumulate_seq_log_prob_grad(params, image, prompt, scale, &mut grad);
    LossValue {
        value: scale * lp,
        margin: None,
        grad,
    }
}

/// Cross-entropy of an empty-prompt base generation under the unsafe prompt:
/// pulls unsafe-prompted outputs toward unconditional ones.
pub fn ft_align_loss(
    params: &ModelParams,
    prompt_unsafe: &Prompt,
    target_image: &GridImage,
) -> LossValue {
    ce_loss(params, target_image, prompt_unsafe)
}

/// How each sequence's log-ratio enters the margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `beta * log-ratio`.
    Sum,
    /// `beta / |y| * log-ratio`.
    TokenAverage,
}

/// DPO with the per-sequence weighting chosen by `norm`.
pub fn preference_loss(
    params: &ModelParams,
    ref_params: &ModelParams,
    pair: &PreferencePair,
    vocab: &Vocab,
    cfg: &DpoConfig,
    seed: u64,
    norm: Normalization,
) -> Result<LossValue> {
    params.check_same_shape(ref_params)?;
    // One drop realisation shared by both sequences.
    let x = token_drop(vocab, &pair.prompt, cfg.drop_prob, seed);
    let (w_pos, w_neg) = match norm {
        Normalization::Sum => (1.0, 1.0),
        Normalization::TokenAverage => (
            1.0 / pair.positive.len() as f64,
            1.0 / pair.negative.len() as f64,
        ),
    };

    let mut g_pos = ModelParams::zeros(*params.shape());
    let mut g_neg = ModelParams::zeros(*params.shape());
    let lp_pos = accumulate_seq_log_prob_grad(params, &pair.positive, &x, 1.0, &mut g_pos);
    let lp_neg = accumulate_seq_log_prob_grad(params, &pair.negative, &x, 1.0, &mut g_neg);
    let ref_pos = seq_log_prob(ref_params, &pair.positive, &x);
    let ref_neg = seq_log_prob(ref_params, &pair.negative, &x);

    let margin = cfg.beta * w_pos * (lp_pos - ref_pos) - cfg.beta * w_neg * (lp_neg - ref_neg);
    // d/dm of -log(sigmoid(m)) is -sigmoid(-m).
    let coef = -sigmoid(-margin) * cfg.beta;
    let mut grad = g_pos;
    grad.scale(coef * w_pos);
    grad.add_scaled(&g_neg, -coef * w_neg);
    Ok(LossValue {
        value: neg_log_sigmoid(margin),
        margin: Some(margin),
        grad,
    })
}

/// Sequence-level DPO. With `drop_prob = 0` this is the vanilla objective.
pub fn dpo_loss(
    params: &ModelParams,
    ref_params: &ModelParams,
    pair: &PreferencePair,
    vocab: &Vocab,
    cfg: &DpoConfig,
    seed: u64,
) -> Result<LossValue> {
    preference_loss(
        params,
        ref_params,
        pair,
        vocab,
        cfg,
        seed,
        Normalization::Sum,
    )
}

/// Token-averaged DPO on the dropped prompt.
pub fn dpo_avg_loss(
    params: &ModelParams,
    ref_params: &ModelParams,
    pair: &PreferencePair,
    vocab: &Vocab,
    cfg: &DpoConfig,
    seed: u64,
) -> Result<LossValue> {
    preference_loss(
        params,
        ref_params,
        pair,
        vocab,
        cfg,
        seed,
        Normalization::TokenAverage,
    )
}

/// Logit-space safe guidance:
/// `logits(prompt) - scale * (logits(unsafe) - logits(empty))`.
pub fn guided_logits(
    params: &ModelParams,
    prev: Option<ImageToken>,
    prompt: &Prompt,
    unsafe_prompt: &Prompt,
    empty_prompt: &Prompt,
    scale: f64,
) -> Vec<f64> {
    let base = armodel::logits(params, prev, prompt);
    let unsafe_l = armodel::logits(params, prev, unsafe_prompt);
    let empty_l = armodel::logits(params, prev, empty_prompt);
    base.iter()
        .zip(unsafe_l.iter().zip(&empty_l))
        .map(|(b, (u, e))| b - scale * (u - e))
        .collect()
}

/// The guided logits as a [`armodel::ConditionedModel`]: the correction term
/// does not depend on the previous token, so it folds into the prompt offset.
pub fn guided_model<'a>(
    params: &'a ModelParams,
    prompt: &Prompt,
    unsafe_prompt: &Prompt,
    empty_prompt: &Prompt,
    scale: f64,
) -> armodel::ConditionedModel<'a> {
    let base = armodel::prompt_offset(params, prompt);
    let unsafe_o = armodel::prompt_offset(params, unsafe_prompt);
    let empty_o = armodel::prompt_offset(params, empty_prompt);
    let offset = base
        .iter()
        .zip(unsafe_o.iter().zip(&empty_o))
        .map(|(b, (u, e))| b - scale * (u - e))
        .collect();
    armodel::ConditionedModel::with_offset(params, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::{grad_seq_log_prob, ConditionedModel, NextTokenModel};
    use crate::synthworld::{build_pairs, World};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_params(world: &World, seed: u64, scale: f64) -> ModelParams {
        let mut p = ModelParams::for_world(world);
        let mut r = rng::stream(seed);
        p.as_mut_slice()
            .iter_mut()
            .for_each(|x| *x = r.gen_range(-scale..scale));
        p
    }

    fn random_pair(world: &World, seed: u64) -> PreferencePair {
        let base = random_params(world, seed ^ 0xabc, 1.0);
        build_pairs(world, &base, world.concepts[0].concept_id, 1, seed, 1.0)
            .unwrap()
            .pairs
            .remove(0)
    }

    fn fd_check(params: &ModelParams, analytic: &ModelParams, f: impl Fn(&ModelParams) -> f64) {
        let h = 1e-5;
        for i in 0..params.as_slice().len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(rel <= 1e-6, "index {i}: analytic {a} vs numeric {fd}");
        }
    }

    #[test]
    fn token_drop_extremes() {
        let w = World::default_world();
        let p = Prompt(vec![2, 3, 0]);
        for seed in 0..100 {
            assert_eq!(token_drop(&w.vocab, &p, 0.0, seed), p);
            assert_eq!(token_drop(&w.vocab, &p, 1.0, seed), Prompt(vec![1, 1, 1]));
        }
    }

    #[test]
    fn token_drop_rate() {
        let w = World::default_world();
        let p = Prompt(vec![2, 3, 4]);
        let mut dropped = 0usize;
        let trials = 100_000 / 3 + 1;
        for seed in 0..trials {
            dropped += token_drop(&w.vocab, &p, 0.3, seed as u64)
                .tokens()
                .iter()
                .filter(|&&t| t == 1)
                .count();
        }
        let rate = dropped as f64 / (3 * trials) as f64;
        assert!((rate - 0.3).abs() <= 0.005, "{rate}");
    }

    #[test]
    fn ce_at_uniform_is_log_v() {
        let w = World::default_world();
        let p = ModelParams::for_world(&w);
        let l = ce_loss(&p, &GridImage(vec![1; 16]), &w.empty_prompt());
        assert!((l.value - 8f64.ln()).abs() < 1e-12);
        let g = grad_seq_log_prob(&p, &GridImage(vec![1; 16]), &w.empty_prompt());
        let mut want = g.clone();
        want.scale(-1.0 / 16.0);
        assert_eq!(l.grad, want);
    }

    #[test]
    fn ce_gradient_and_descent() {
        let w = World::micro(4);
        let p = random_params(&w, 1, 1.0);
        let prompt = Prompt(vec![2, 3]);
        let img = GridImage(vec![0, 1, 3, 0]);
        let l = ce_loss(&p, &img, &prompt);
        fd_check(&p, &l.grad, |q| ce_loss(q, &img, &prompt).value);
        let mut stepped = p.clone();
        stepped.add_scaled(&l.grad, -1e-3);
        assert!(ce_loss(&stepped, &img, &prompt).value < l.value);
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let w = World::default_world();
        let p = random_params(&w, 3, 1.0);
        let pair = random_pair(&w, 3);
        for f in [dpo_loss, dpo_avg_loss] {
            let l = f(&p, &p, &pair, &w.vocab, &DpoConfig::default(), 9).unwrap();
            assert_eq!(l.margin, Some(0.0));
            assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_beta_doubles_margin() {
        let w = World::default_world();
        let p = random_params(&w, 4, 1.0);
        let r = random_params(&w, 5, 1.0);
        let pair = random_pair(&w, 4);
        let m1 = dpo_loss(
            &p,
            &r,
            &pair,
            &w.vocab,
            &DpoConfig::new(0.1, 0.2).unwrap(),
            1,
        )
        .unwrap()
        .margin
        .unwrap();
        let m2 = dpo_loss(
            &p,
            &r,
            &pair,
            &w.vocab,
            &DpoConfig::new(0.2, 0.2).unwrap(),
            1,
        )
        .unwrap()
        .margin
        .unwrap();
        assert!((m2 - 2.0 * m1).abs() <= 1e-12 * m1.abs().max(1.0));
    }

    #[test]
    fn dpo_gradients_match_finite_differences() {
        let w = World::micro(4);
        for seed in 0..5 {
            let p = random_params(&w, 10 + seed, 1.0);
            let r = random_params(&w, 20 + seed, 1.0);
            let pair = random_pair(&w, seed);
            let cfg = DpoConfig::new(0.5, 0.3).unwrap();
            for f in [dpo_loss, dpo_avg_loss] {
                let l = f(&p, &r, &pair, &w.vocab, &cfg, seed).unwrap();
                fd_check(&p, &l.grad, |q| {
                    f(q, &r, &pair, &w.vocab, &cfg, seed).unwrap().value
                });
            }
        }
    }

    #[test]
    fn avg_equals_sum_with_scaled_beta() {
        let w = World::default_world();
        let p = random_params(&w, 30, 1.0);
        let r = random_params(&w, 31, 1.0);
        let pair = random_pair(&w, 30);
        let a = dpo_avg_loss(
            &p,
            &r,
            &pair,
            &w.vocab,
            &DpoConfig::new(0.1, 0.1).unwrap(),
            2,
        )
        .unwrap();
        let b = dpo_loss(
            &p,
            &r,
            &pair,
            &w.vocab,
            &DpoConfig::new(0.1 / 16.0, 0.1).unwrap(),
            2,
        )
        .unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        for (x, y) in a.grad.as_slice().iter().zip(b.grad.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_reference_rejected() {
        let w = World::default_world();
        let p = ModelParams::for_world(&w);
        let r = ModelParams::for_world(&World::micro(16));
        let pair = random_pair(&w, 0);
        assert!(matches!(
            dpo_loss(&p, &r, &pair, &w.vocab, &DpoConfig::default(), 0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn full_drop_ignores_prompt_content() {
        let w = World::default_world();
        let p = random_params(&w, 40, 1.0);
        let r = random_params(&w, 41, 1.0);
        let mut pair = random_pair(&w, 40);
        let cfg = DpoConfig::new(0.1, 1.0).unwrap();
        let before = dpo_avg_loss(&p, &r, &pair, &w.vocab, &cfg, 3)
            .unwrap()
            .value;
        pair.prompt.0.reverse();
        pair.prompt.0[0] = 5;
        let after = dpo_avg_loss(&p, &r, &pair, &w.vocab, &cfg, 3)
            .unwrap()
            .value;
        assert_eq!(before, after);
    }

    #[test]
    fn small_step_from_reference_raises_margin() {
        let w = World::default_world();
        let r = random_params(&w, 50, 1.0);
        let pair = random_pair(&w, 50);
        let cfg = DpoConfig::default();
        let l = dpo_avg_loss(&r, &r, &pair, &w.vocab, &cfg, 4).unwrap();
        let mut p = r.clone();
        p.add_scaled(&l.grad, -1e-4);
        let m = dpo_avg_loss(&p, &r, &pair, &w.vocab, &cfg, 4)
            .unwrap()
            .margin
            .unwrap();
        assert!(m > 0.0, "{m}");
    }

    #[test]
    fn ft_with_inert_conditioning_equals_empty_prompt_ce() {
        let w = World::default_world();
        let mut base = random_params(&w, 60, 1.0);
        base.block_mut(crate::ParamBlock::Cond).fill(0.0);
        let empty = w.empty_prompt();
        let target = armodel::greedy_decode(&ConditionedModel::new(&base, &empty));
        let unsafe_prompt = Prompt(vec![2, 3, 0]);
        let ft = ft_align_loss(&base, &unsafe_prompt, &target);
        let ce = ce_loss(&base, &target, &empty);
        assert_eq!(ft.value, ce.value);
    }

    #[test]
    fn ft_gradient_matches_finite_differences() {
        let w = World::micro(4);
        let p = random_params(&w, 70, 1.0);
        let img = GridImage(vec![3, 3, 0, 2]);
        let prompt = Prompt(vec![2, 3]);
        let l = ft_align_loss(&p, &prompt, &img);
        fd_check(&p, &l.grad, |q| ft_align_loss(q, &prompt, &img).value);
    }

    #[test]
    fn guidance_identities() {
        let w = World::default_world();
        let p = random_params(&w, 80, 1.0);
        let prompt = Prompt(vec![2, 4, 0]);
        let unsafe_prompt = Prompt(vec![2, 0, 0]);
        let empty = w.empty_prompt();
        for prev in [None, Some(3)] {
            let plain = armodel::logits(&p, prev, &prompt);
            assert_eq!(
                guided_logits(&p, prev, &prompt, &unsafe_prompt, &empty, 0.0),
                plain
            );
            assert_eq!(guided_logits(&p, prev, &prompt, &empty, &empty, 1.0), plain);
            let folded = guided_model(&p, &prompt, &unsafe_prompt, &empty, 1.5);
            let mut out = vec![0.0; 8];
            folded.next_logits(prev, &mut out);
            let direct = guided_logits(&p, prev, &prompt, &unsafe_prompt, &empty, 1.5);
            for (a, b) in out.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn dpo_value_decreases_in_margin(a in -50.0f64..50.0, d in 1e-3f64..10.0) {
            prop_assert!(neg_log_sigmoid(a + d) < neg_log_sigmoid(a));
            prop_assert!(neg_log_sigmoid(a) > 0.0);
        }
    }
}
