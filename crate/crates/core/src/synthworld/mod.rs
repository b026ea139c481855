//! The synthetic concept world.
//!
//! A world has `V` image tokens, `C` condition tokens and images of `L`
//! tokens. Each concept owns a disjoint set of *signature* image tokens; the
//! fraction of positions holding those tokens is the exact concept detector
//! that the evaluation uses.
//!
//! Condition tokens split into two reserved ids (`<empty>` and `<drop>`) and
//! concept ids. Prompts have a fixed length per world and are padded with
//! `<empty>`.

mod pairs;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use pairs::{build_pairs, load_pairs, save_pairs, PairSet, PairSetHeader, PreferencePair};

pub type ImageToken = u32;
pub type CondToken = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub image_vocab_size: usize,
    pub cond_vocab_size: usize,
    pub seq_len: usize,
    pub prompt_len: usize,
    pub empty_token: CondToken,
    pub drop_token: CondToken,
}

impl Vocab {
    pub fn validate(&self) -> Result<()> {
        if self.image_vocab_size < 2 {
            return Err(Error::invalid(
                "Vocab.image_vocab_size",
                "must be at least 2",
            ));
        }
        if self.cond_vocab_size < 3 {
            return Err(Error::invalid(
                "Vocab.cond_vocab_size",
                "must be at least 3",
            ));
        }
        if self.seq_len < 1 {
            return Err(Error::invalid("Vocab.seq_len", "must be at least 1"));
        }
        if self.prompt_len < 1 {
            return Err(Error::invalid("Vocab.prompt_len", "must be at least 1"));
        }
        for (field, id) in [
            ("Vocab.empty_token", self.empty_token),
            ("Vocab.drop_token", self.drop_token),
        ] {
            if id as usize >= self.cond_vocab_size {
                return Err(Error::TokenOutOfRange {
                    field: field.into(),
                    value: id,
                    limit: self.cond_vocab_size,
                });
            }
        }
        if self.empty_token == self.drop_token {
            return Err(Error::invalid(
                "Vocab.drop_token",
                "must differ from empty_token",
            ));
        }
        Ok(())
    }

    pub fn is_reserved(&self, token: CondToken) -> bool {
        token == self.empty_token || token == self.drop_token
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept_id: CondToken,
    pub signature_tokens: Vec<ImageToken>,
    pub base_rate: f64,
    pub boosted_rate: f64,
}

impl ConceptSpec {
    pub fn is_signature(&self, token: ImageToken) -> bool {
        self.signature_tokens.contains(&token)
    }
}

/// A validated world definition. The TOML form uses the field names of
/// [`Vocab`] at the top level and one `[[concepts]]` table per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    #[serde(flatten)]
    pub vocab: Vocab,
    pub concepts: Vec<ConceptSpec>,
}

impl World {
    /// V=8, C=6 (`<empty>`=0, `<drop>`=1, concepts 2..=5), L=16, prompts of 3.
    /// Concept `k` owns image token `k - 2`; tokens 4..8 are filler.
    pub fn default_world() -> World {
        let concepts = (0..4)
            .map(|k| ConceptSpec {
                concept_id: 2 + k,
                signature_tokens: vec![k],
                base_rate: 0.05,
                boosted_rate: 0.8,
            })
            .collect();
        World {
            vocab: Vocab {
                image_vocab_size: 8,
                cond_vocab_size: 6,
                seq_len: 16,
                prompt_len: 3,
                empty_token: 0,
                drop_token: 1,
            },
            concepts,
        }
    }

    /// V=4, C=4 with two concepts and images of `seq_len` tokens, small enough
    /// to enumerate every image.
    pub fn micro(seq_len: usize) -> World {
        let concepts = (0..2)
            .map(|k| ConceptSpec {
                concept_id: 2 + k,
                signature_tokens: vec![k],
                base_rate: 0.05,
                boosted_rate: 0.8,
            })
            .collect();
        World {
            vocab: Vocab {
                image_vocab_size: 4,
                cond_vocab_size: 4,
                seq_len,
                prompt_len: 2,
                empty_token: 0,
                drop_token: 1,
            },
            concepts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.concepts.is_empty() {
            return Err(Error::invalid(
                "World.concepts",
                "at least one concept is required",
            ));
        }
        let v = self.vocab.image_vocab_size;
        let mut seen_ids = BTreeSet::new();
        let mut seen_sig = BTreeSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            let at = |f: &str| format!("ConceptSpec[{i}].{f}");
            if c.concept_id as usize >= self.vocab.cond_vocab_size {
                return Err(Error::TokenOutOfRange {
                    field: at("concept_id"),
                    value: c.concept_id,
                    limit: self.vocab.cond_vocab_size,
                });
            }
            if self.vocab.is_reserved(c.concept_id) {
                return Err(Error::invalid(
                    at("concept_id"),
                    "collides with a reserved token",
                ));
            }
            if !seen_ids.insert(c.concept_id) {
                return Err(Error::invalid(at("concept_id"), "duplicate concept id"));
            }
            if c.signature_tokens.is_empty() {
                return Err(Error::invalid(at("signature_tokens"), "must be nonempty"));
            }
            for &t in &c.signature_tokens {
                if t as usize >= v {
                    return Err(Error::TokenOutOfRange {
                        field: at("signature_tokens"),
                        value: t,
                        limit: v,
                    });
                }
                if !seen_sig.insert(t) {
                    return Err(Error::invalid(
                        at("signature_tokens"),
                        format!("token {t} overlaps another concept's signature"),
                    ));
                }
            }
            for (name, r) in [("base_rate", c.base_rate), ("boosted_rate", c.boosted_rate)] {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::invalid(at(name), format!("{r} is outside [0, 1]")));
                }
            }
            if c.boosted_rate <= c.base_rate {
                return Err(Error::invalid(
                    format!("ConceptSpec[{i}]"),
                    format!(
                        "boosted_rate ({}) must exceed base_rate ({})",
                        c.boosted_rate, c.base_rate
                    ),
                ));
            }
        }
        if seen_sig.len() == v {
            return Err(Error::invalid(
                "World.concepts",
                "signature sets cover every image token; at least one filler token is required",
            ));
        }
        Ok(())
    }

    pub fn concept(&self, id: CondToken) -> Result<&ConceptSpec> {
        self.concepts
            .iter()
            .find(|c| c.concept_id == id)
            .ok_or(Error::UnknownConcept(id))
    }

    pub fn concept_ids(&self) -> impl Iterator<Item = CondToken> + '_ {
        self.concepts.iter().map(|c| c.concept_id)
    }

    /// Image tokens that belong to no signature set.
    pub fn filler_tokens(&self) -> Vec<ImageToken> {
        (0..self.vocab.image_vocab_size as ImageToken)
            .filter(|t| !self.concepts.iter().any(|c| c.is_signature(*t)))
            .collect()
    }

    pub fn empty_prompt(&self) -> Prompt {
        Prompt(vec![self.vocab.empty_token; self.vocab.prompt_len])
    }

    pub fn from_toml_str(text: &str) -> Result<World> {
        let world: World = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    /// Canonical TOML text. Parsing it back yields the same world, and
    /// canonicalising that again yields the same text.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("world serialises to TOML")
    }

    pub fn load(path: &Path) -> Result<World> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        World::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Condition-token sequence of length `prompt_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(pub Vec<CondToken>);

impl Prompt {
    pub fn tokens(&self) -> &[CondToken] {
        &self.0
    }

    pub fn contains(&self, token: CondToken) -> bool {
        self.0.contains(&token)
    }

    pub fn validate(&self, vocab: &Vocab, field: &str) -> Result<()> {
        if self.0.len() != vocab.prompt_len {
            return Err(Error::invalid(
                field,
                format!(
                    "prompt has {} tokens, expected {}",
                    self.0.len(),
                    vocab.prompt_len
                ),
            ));
        }
        check_range(&self.0, vocab.cond_vocab_size, field)
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_tokens(f, &self.0)
    }
}

/// Image-token sequence of length `seq_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridImage(pub Vec<ImageToken>);

impl GridImage {
    pub fn tokens(&self) -> &[ImageToken] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, vocab: &Vocab, field: &str) -> Result<()> {
        if self.0.len() != vocab.seq_len {
            return Err(Error::invalid(
                field,
                format!(
                    "image has {} tokens, expected {}",
                    self.0.len(),
                    vocab.seq_len
                ),
            ));
        }
        check_range(&self.0, vocab.image_vocab_size, field)
    }
}

impl fmt::Display for GridImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_tokens(f, &self.0)
    }
}

fn write_tokens(f: &mut fmt::Formatter<'_>, tokens: &[u32]) -> fmt::Result {
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            f.write_str(" ")?;
        }
        write!(f, "{t}")?;
    }
    Ok(())
}

fn check_range(tokens: &[u32], limit: usize, field: &str) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= limit) {
        Some(&value) => Err(Error::TokenOutOfRange {
            field: field.into(),
            value,
            limit,
        }),
        None => Ok(()),
    }
}

/// Checks every prompt token is reserved or a known concept.
fn check_concepts(world: &World, prompt: &Prompt) -> Result<()> {
    prompt.validate(&world.vocab, "prompt")?;
    for &t in prompt.tokens() {
        if !world.vocab.is_reserved(t) {
            world.concept(t)?;
        }
    }
    Ok(())
}

/// Independent-position renderer standing in for an external generator.
///
/// Each position picks concept `k` with weight `boosted_rate` when `k` is in
/// the prompt and `base_rate` otherwise, and then a uniform token from its
/// signature set. Leftover mass goes to a uniform filler token. When the
/// weights sum past one they are renormalised and no filler is drawn.
pub fn render_oracle(world: &World, prompt: &Prompt, seed: u64) -> Result<GridImage> {
    check_concepts(world, prompt)?;
    let weights: Vec<f64> = world
        .concepts
        .iter()
        .map(|c| {
            if prompt.contains(c.concept_id) {
                c.boosted_rate
            } else {
                c.base_rate
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let norm = total.max(1.0);
    let filler = world.filler_tokens();

    let mut rng = rng::stream(seed);
    let tokens = (0..world.vocab.seq_len)
        .map(|_| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (c, w) in world.concepts.iter().zip(&weights) {
                acc += w / norm;
                if u < acc {
                    return c.signature_tokens[rng.gen_range(0..c.signature_tokens.len())];
                }
            }
            if total >= 1.0 {
                // u landed in the rounding gap above the last cumulative weight
                let last = world
                    .concepts
                    .iter()
                    .zip(&weights)
                    .rev()
                    .find(|(_, w)| **w > 0.0);
                if let Some((c, _)) = last {
                    return c.signature_tokens[rng.gen_range(0..c.signature_tokens.len())];
                }
            }
            filler[rng.gen_range(0..filler.len())]
        })
        .collect();
    Ok(GridImage(tokens))
}

/// Replaces every occurrence of `target` with `<empty>`, leaving the rest in
/// place. This is the caption-refinement step at token level: describe the
/// prompt, identify the target concept, filter it out.
pub fn refine_prompt(vocab: &Vocab, prompt: &Prompt, target: CondToken) -> Prompt {
    Prompt(
        prompt
            .0
            .iter()
            .map(|&t| if t == target { vocab.empty_token } else { t })
            .collect(),
    )
}

/// Fraction of positions holding one of the concept's signature tokens.
pub fn concept_frequency(image: &GridImage, concept: &ConceptSpec) -> f64 {
    if image.is_empty() {
        return 0.0;
    }
    let hits = image.0.iter().filter(|&&t| concept.is_signature(t)).count();
    hits as f64 / image.len() as f64
}

fn non_target_concepts(world: &World, exclude: &[CondToken]) -> Vec<CondToken> {
    world
        .concept_ids()
        .filter(|id| !exclude.contains(id))
        .collect()
}

/// `target` plus one other concept, padded with `<empty>` and shuffled.
/// A third concept would dilute the target below what the positives can
/// separate from, so extra slots stay empty.
pub fn sample_unsafe_prompt<R: Rng>(
    world: &World,
    target: CondToken,
    rng: &mut R,
) -> Result<Prompt> {
    let others = non_target_concepts(world, &[target]);
    if others.is_empty() {
        return Err(Error::NoNonTargetConcepts);
    }
    if world.vocab.prompt_len < 2 {
        return Err(Error::invalid(
            "Vocab.prompt_len",
            "unsafe prompts need room for the target and one other concept",
        ));
    }
    let mut tokens = vec![target, others[rng.gen_range(0..others.len())]];
    tokens.resize(world.vocab.prompt_len, world.vocab.empty_token);
    tokens.shuffle(rng);
    Ok(Prompt(tokens))
}

/// A prompt containing `concept` plus at most one companion concept drawn
/// from the concepts not in `exclude`, padded with `<empty>`.
pub fn sample_concept_prompt<R: Rng>(
    world: &World,
    concept: CondToken,
    exclude: &[CondToken],
    rng: &mut R,
) -> Prompt {
    let mut skip = exclude.to_vec();
    skip.push(concept);
    let companions = non_target_concepts(world, &skip);
    let mut tokens = vec![concept];
    if world.vocab.prompt_len >= 2 {
        let pick = rng.gen_range(0..=companions.len());
        tokens.push(if pick == companions.len() {
            world.vocab.empty_token
        } else {
            companions[pick]
        });
    }
    tokens.resize(world.vocab.prompt_len, world.vocab.empty_token);
    tokens.shuffle(rng);
    Prompt(tokens)
}

/// `[concept, <empty>, ...]`.
pub fn single_concept_prompt(world: &World, concept: CondToken) -> Prompt {
    let mut tokens = vec![world.vocab.empty_token; world.vocab.prompt_len];
    tokens[0] = concept;
    Prompt(tokens)
}

/// Pretraining corpus: each prompt slot is `<empty>` with probability 0.4,
/// otherwise a uniform concept; each image is rendered by the oracle.
pub fn pretrain_corpus(world: &World, n: usize, seed: u64) -> Result<Vec<(Prompt, GridImage)>> {
    let ids: Vec<CondToken> = world.concept_ids().collect();
    (0..n)
        .map(|i| {
            let item_seed = rng::mix(seed, i as u64);
            let mut r = rng::stream(item_seed);
            let tokens = (0..world.vocab.prompt_len)
                .map(|_| {
                    if r.gen_bool(0.4) {
                        world.vocab.empty_token
                    } else {
                        ids[r.gen_range(0..ids.len())]
                    }
                })
                .collect();
            let prompt = Prompt(tokens);
            let image = render_oracle(world, &prompt, rng::mix(item_seed, 1))?;
            Ok((prompt, image))
        })
        .collect()
}
