//! Central finite differences against the analytic gradients.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::armodel::{self, GenerationConfig, ModelParams, ParamBlock};
use crate::error::Result;
use crate::losses::{ce_loss, dpo_avg_loss, dpo_loss, ft_align_loss, DpoConfig, LossValue};
use crate::rng;
use crate::synthworld::{build_pairs, sample_unsafe_prompt, PreferencePair, World};

pub const FD_STEP: f64 = 1e-5;

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that entries whose true gradient is ~0 are judged absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Dpo,
    DpoAvg,
    FtAlign,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Ce,
        LossKind::Dpo,
        LossKind::DpoAvg,
        LossKind::FtAlign,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Ce => "ce_loss",
            LossKind::Dpo => "dpo_loss",
            LossKind::DpoAvg => "dpo_avg_loss",
            LossKind::FtAlign => "ft_align_loss",
        }
    }
}

/// Where the parameters under test come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamInit {
    /// Uniform in `[-1, 1]`, reference drawn independently.
    Random,
    /// Random, with the reference equal to the parameters (margin zero).
    AtReference,
    /// All zeros for both.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub kind: LossKind,
    pub trials: usize,
    pub tolerance: f64,
    pub max_rel_error: BTreeMap<String, f64>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

struct Trial {
    params: ModelParams,
    reference: ModelParams,
    pair: PreferencePair,
    seed: u64,
}

fn random_params(world: &World, r: &mut impl Rng) -> ModelParams {
    let mut p = ModelParams::for_world(world);
    p.as_mut_slice()
        .iter_mut()
        .for_each(|x| *x = r.gen_range(-1.0..1.0));
    p
}

fn make_trial(world: &World, init: ParamInit, seed: u64) -> Result<Trial> {
    let mut r = rng::stream(seed);
    let (params, reference) = match init {
        ParamInit::Random => (random_params(world, &mut r), random_params(world, &mut r)),
        ParamInit::AtReference => {
            let p = random_params(world, &mut r);
            (p.clone(), p)
        }
        ParamInit::Zero => (ModelParams::for_world(world), ModelParams::for_world(world)),
    };
    let generator = random_params(world, &mut r);
    let target = world.concepts[r.gen_range(0..world.concepts.len())].concept_id;
    let mut pair = build_pairs(world, &generator, target, 1, r.gen(), 1.0)?
        .pairs
        .remove(0);
    // Vary prompts beyond what pair construction produces.
    if r.gen_bool(0.5) {
        pair.prompt = sample_unsafe_prompt(world, target, &mut r)?;
    }
    Ok(Trial {
        params,
        reference,
        pair,
        seed: r.gen(),
    })
}

fn evaluate(
    kind: LossKind,
    world: &World,
    trial: &Trial,
    params: &ModelParams,
) -> Result<LossValue> {
    let cfg = DpoConfig::default();
    let vocab = &world.vocab;
    Ok(match kind {
        LossKind::Ce => ce_loss(params, &trial.pair.negative, &trial.pair.prompt),
        LossKind::Dpo => dpo_loss(
            params,
            &trial.reference,
            &trial.pair,
            vocab,
            &cfg,
            trial.seed,
        )?,
        LossKind::DpoAvg => dpo_avg_loss(
            params,
            &trial.reference,
            &trial.pair,
            vocab,
            &cfg,
            trial.seed,
        )?,
        LossKind::FtAlign => {
            let target = armodel::sample(
                &trial.reference,
                &world.empty_prompt(),
                &GenerationConfig::default().with_seed(trial.seed),
            );
            ft_align_loss(params, &trial.pair.prompt, &target)
        }
    })
}

/// Compares analytic and central-difference gradients (step [`FD_STEP`]) for
/// every parameter on `trials` random cases in `world`, reporting the worst
/// relative error per parameter block.
pub fn grad_check(
    world: &World,
    kind: LossKind,
    init: ParamInit,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    world.validate()?;
    let mut worst: BTreeMap<String, f64> = ParamBlock::ALL
        .iter()
        .map(|b| (b.name().to_string(), 0.0))
        .collect();
    for t in 0..trials {
        let trial = make_trial(world, init, rng::mix(seed, t as u64))?;
        let analytic = evaluate(kind, world, &trial, &trial.params)?.grad;
        for block in ParamBlock::ALL {
            let range = trial.params.shape().block_range(block);
            let entry = worst.get_mut(block.name()).expect("block present");
            for i in range {
                let mut plus = trial.params.clone();
                plus.as_mut_slice()[i] += FD_STEP;
                let mut minus = trial.params.clone();
                minus.as_mut_slice()[i] -= FD_STEP;
                let numeric = (evaluate(kind, world, &trial, &plus)?.value
                    - evaluate(kind, world, &trial, &minus)?.value)
                    / (2.0 * FD_STEP);
                let a = analytic.as_slice()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                // NaN must fail the check.
                *entry = if rel.is_nan() {
                    f64::NAN
                } else {
                    entry.max(rel)
                };
            }
        }
    }
    let passed = worst.values().all(|e| *e <= tolerance);
    Ok(GradCheckReport {
        kind,
        trials,
        tolerance,
        max_rel_error: worst,
        passed,
    })
}
