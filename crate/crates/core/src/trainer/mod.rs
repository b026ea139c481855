//! Optimisation: pretraining the base model and erasure fine-tuning.
//!
//! Training is single-writer. Per-example gradients inside a minibatch are
//! computed in parallel and summed in batch order, so runs are bit-for-bit
//! reproducible regardless of thread count.

mod adam;
mod curves;
mod gradcheck;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::armodel::{self, GenerationConfig, ModelParams, ParamShape};
use crate::error::{Error, Result};
use crate::losses::{self, ce_loss, ft_align_loss, DpoConfig, LossValue, Normalization};
use crate::rng;
use crate::synthworld::{GridImage, PairSet, Prompt, World};

pub use adam::{adam_step, adam_step_slice, AdamConfig, AdamState, ADAM_EPSILON};
pub use curves::{read_curves, record_curves, write_curves};
pub use gradcheck::{grad_check, GradCheckReport, LossKind, ParamInit, FD_STEP};

pub const DEFAULT_BATCH_SIZE: usize = 64;

const ITERATION_SEED_TAG: u64 = 0x17e7_a710;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pretrain,
    /// Token drop plus token-level average DPO on decoupled pairs.
    Vce,
    DpoVanilla,
    DpoDrop,
    /// Align unsafe-prompt outputs with empty-prompt generations.
    Ft,
}

impl Method {
    pub const ERASURE: [Method; 4] = [Method::Vce, Method::DpoVanilla, Method::DpoDrop, Method::Ft];

    pub fn label(self) -> &'static str {
        match self {
            Method::Pretrain => "pretrain",
            Method::Vce => "vce",
            Method::DpoVanilla => "dpo_vanilla",
            Method::DpoDrop => "dpo_drop",
            Method::Ft => "ft",
        }
    }

    /// Effective DPO settings for the preference methods: vanilla never
    /// drops, and only `vce` averages over tokens.
    pub fn preference_setup(self, cfg: &DpoConfig) -> Option<(DpoConfig, Normalization)> {
        match self {
            Method::Vce => Some((*cfg, Normalization::TokenAverage)),
            Method::DpoDrop => Some((*cfg, Normalization::Sum)),
            Method::DpoVanilla => Some((
                DpoConfig {
                    drop_prob: 0.0,
                    ..*cfg
                },
                Normalization::Sum,
            )),
            Method::Pretrain | Method::Ft => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Ok(match s {
            "pretrain" => Method::Pretrain,
            "vce" => Method::Vce,
            "dpo_vanilla" => Method::DpoVanilla,
            "dpo_drop" => Method::DpoDrop,
            "ft" => Method::Ft,
            other => {
                return Err(Error::invalid(
                    "method",
                    format!("unknown method `{other}`"),
                ))
            }
        })
    }
}

/// Per-task learning rate and iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Artistic style: lr 1e-5, 30 iterations.
    Style,
    /// Explicit content: lr 1e-5, 500 iterations.
    Explicit,
    /// Object removal: lr 5e-6, 50 iterations.
    Object,
}

impl Preset {
    pub fn learning_rate(self) -> f64 {
        match self {
            Preset::Style | Preset::Explicit => 1e-5,
            Preset::Object => 5e-6,
        }
    }

    pub fn iterations(self) -> usize {
        match self {
            Preset::Style => 30,
            Preset::Explicit => 500,
            Preset::Object => 50,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Preset::Style => "style",
            Preset::Explicit => "explicit",
            Preset::Object => "object",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        Ok(match s {
            "style" => Preset::Style,
            "explicit" => Preset::Explicit,
            "object" => Preset::Object,
            other => {
                return Err(Error::invalid(
                    "preset",
                    format!("unknown preset `{other}`"),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub method: Method,
}

impl TrainConfig {
    pub fn preset(preset: Preset, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: preset.learning_rate(),
            iterations: preset.iterations(),
            batch_size: DEFAULT_BATCH_SIZE,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            weight_decay: 0.0,
            seed,
            method,
        }
    }

    /// Settings used to produce the base model.
    pub fn pretrain(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            iterations: 400,
            batch_size: 256,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            weight_decay: 0.0,
            seed,
            method: Method::Pretrain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "TrainConfig.learning_rate",
                "must be positive",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("TrainConfig.batch_size", "must be positive"));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(
                    format!("TrainConfig.{name}"),
                    "must lie in [0, 1)",
                ));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(
                "TrainConfig.weight_decay",
                "must be nonnegative",
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Largest absolute entry of the minibatch gradient.
    pub grad_maxnorm: f64,
    /// Mean DPO margin over the minibatch; zero for likelihood objectives.
    pub margin_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub records: Vec<CurveRecord>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.loss.is_finite() && r.grad_maxnorm.is_finite() && r.margin_mean.is_finite())
    }
}

/// A non-finite loss or gradient. Training stops at this iteration; the
/// offending record is the last one in the curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: LossCurve,
    pub divergence: Option<Divergence>,
}

/// Yields minibatches by walking a fresh permutation of `0..n` per epoch.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, seed: u64) -> BatchSchedule {
        let mut s = BatchSchedule {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut rng::stream(rng::mix(self.seed, self.epoch)));
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Called after every completed Adam step with the step count and the
/// updated parameters.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &ModelParams);

/// Runs `iterations` Adam steps on the mean of `loss_at(params, index, seed)`
/// over scheduled minibatches of `0..n`.
fn optimise<F>(
    init: ModelParams,
    n: usize,
    cfg: &TrainConfig,
    loss_at: F,
    observe: Observer<'_>,
) -> Result<TrainOutcome>
where
    F: Fn(&ModelParams, usize, u64) -> Result<LossValue> + Sync,
{
    cfg.validate()?;
    let mut params = init;
    let mut state = AdamState::for_params(&params);
    let mut schedule = BatchSchedule::new(n, cfg.seed);
    let mut curve = LossCurve::default();
    let adam = cfg.adam();

    for iteration in 0..cfg.iterations {
        let batch = schedule.next_batch(cfg.batch_size.min(n));
        let iter_seed = rng::mix(cfg.seed ^ ITERATION_SEED_TAG, iteration as u64);
        let losses = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| loss_at(&params, idx, rng::mix(iter_seed, slot as u64)))
            .collect::<Result<Vec<_>>>()?;

        let inv = 1.0 / losses.len() as f64;
        let mut grad = ModelParams::zeros(*params.shape());
        let mut loss = 0.0;
        let mut margin = 0.0;
        for l in &losses {
            grad.add_scaled(&l.grad, inv);
            loss += l.value * inv;
            margin += l.margin.unwrap_or(0.0) * inv;
        }
        let record = CurveRecord {
            iteration,
            loss,
            grad_maxnorm: if grad.is_finite() {
                grad.max_abs()
            } else {
                f64::NAN
            },
            margin_mean: margin,
        };
        curve.records.push(record);
        if !record.loss.is_finite() || !grad.is_finite() {
            return Ok(TrainOutcome {
                params,
                curve,
                divergence: Some(Divergence {
                    iteration,
                    reason: format!("non-finite loss or gradient (loss {loss})"),
                }),
            });
        }
        adam_step(&mut params, &grad, &mut state, &adam);
        observe(iteration + 1, &params);
    }

    Ok(TrainOutcome {
        params,
        curve,
        divergence: None,
    })
}

/// Corpus size used by [`pretrain_base`].
pub const PRETRAIN_CORPUS: usize = 4000;

/// Fits the base model to oracle renders by minimising mean cross-entropy,
/// starting from all-zero parameters.
pub fn pretrain(
    world: &World,
    corpus: &[(Prompt, GridImage)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    world.validate()?;
    if cfg.method != Method::Pretrain {
        return Err(Error::invalid(
            "TrainConfig.method",
            "pretraining requires method `pretrain`",
        ));
    }
    let init = ModelParams::for_world(world);
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            params: init,
            curve: LossCurve::default(),
            divergence: None,
        });
    }
    if corpus.is_empty() {
        return Err(Error::invalid("corpus", "pretraining corpus is empty"));
    }
    optimise(
        init,
        corpus.len(),
        cfg,
        |p, i, _| {
            let (prompt, image) = &corpus[i];
            Ok(ce_loss(p, image, prompt))
        },
        &mut |_, _| {},
    )
}

/// Oracle corpus plus [`TrainConfig::pretrain`], all keyed by `seed`.
pub fn pretrain_base(world: &World, seed: u64) -> Result<TrainOutcome> {
    let corpus = crate::synthworld::pretrain_corpus(world, PRETRAIN_CORPUS, rng::mix(seed, 0))?;
    pretrain(world, &corpus, &TrainConfig::pretrain(rng::mix(seed, 1)))
}

/// Fine-tunes a copy of `base` with the configured erasure method. The
/// reference model for the preference losses is `base` itself, which is
/// never modified.
pub fn erase(
    base: &ModelParams,
    pairs: &PairSet,
    cfg: &TrainConfig,
    dpo_cfg: &DpoConfig,
) -> Result<TrainOutcome> {
    erase_observed(base, pairs, cfg, dpo_cfg, &mut |_, _| {})
}

/// [`erase`] with a callback after every optimiser step.
pub fn erase_observed(
    base: &ModelParams,
    pairs: &PairSet,
    cfg: &TrainConfig,
    dpo_cfg: &DpoConfig,
    observe: Observer<'_>,
) -> Result<TrainOutcome> {
    dpo_cfg.validate()?;
    cfg.validate()?;
    if *base.shape() != ParamShape::for_world(&pairs.world) {
        return Err(Error::DimensionMismatch(
            "base model does not match the pair-set world".into(),
        ));
    }
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            params: base.clone(),
            curve: LossCurve::default(),
            divergence: None,
        });
    }
    let vocab = &pairs.world.vocab;
    match cfg.method {
        Method::Pretrain => Err(Error::invalid(
            "TrainConfig.method",
            "`pretrain` is not an erasure method",
        )),
        Method::Ft => {
            let targets = ft_targets(base, pairs, cfg.seed)?;
            optimise(
                base.clone(),
                pairs.len(),
                cfg,
                |p, i, _| Ok(ft_align_loss(p, &pairs.pairs[i].prompt, &targets[i])),
                observe,
            )
        }
        method => {
            let (eff, norm) = method.preference_setup(dpo_cfg).expect("preference method");
            optimise(
                base.clone(),
                pairs.len(),
                cfg,
                |p, i, seed| {
                    losses::preference_loss(p, base, &pairs.pairs[i], vocab, &eff, seed, norm)
                },
                observe,
            )
        }
    }
}

/// Empty-prompt generations of the base model, one per pair.
pub fn ft_targets(base: &ModelParams, pairs: &PairSet, seed: u64) -> Result<Vec<GridImage>> {
    let empty = pairs.world.empty_prompt();
    let cfg = GenerationConfig::new(1.0, 0)?;
    let targets_seed = rng::mix(seed, 0xf7);
    Ok((0..pairs.len())
        .into_par_iter()
        .map(|i| {
            armodel::sample(
                base,
                &empty,
                &cfg.with_seed(rng::mix(targets_seed, i as u64)),
            )
        })
        .collect())
}

/// Mean margin of `params` against `reference` over every pair, with no
/// token drop.
pub fn mean_margin(
    params: &ModelParams,
    reference: &ModelParams,
    pairs: &PairSet,
    dpo_cfg: &DpoConfig,
    norm: Normalization,
) -> Result<f64> {
    let cfg = DpoConfig {
        drop_prob: 0.0,
        ..*dpo_cfg
    };
    let margins = pairs
        .pairs
        .par_iter()
        .map(|pair| {
            losses::preference_loss(params, reference, pair, &pairs.world.vocab, &cfg, 0, norm)
                .map(|l| l.margin.unwrap_or(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(margins.iter().sum::<f64>() / margins.len() as f64)
}
