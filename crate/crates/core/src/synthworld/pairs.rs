//! Preference-pair construction and the line-delimited pair-set file.
//!
//! Negatives come from the base model under an unsafe prompt and so carry
//! both the target concept and whatever else the prompt asked for. Positives
//! are rendered by the independent oracle from the refined prompt, which
//! keeps the safe content and drops the target.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    refine_prompt, render_oracle, sample_unsafe_prompt, CondToken, GridImage, Prompt, World,
};
use crate::armodel::{self, GenerationConfig, ModelParams, ParamShape};
use crate::error::{Error, Result};
use crate::rng;

pub const PAIRS_FORMAT: &str = "erasure-pairs/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Prompt,
    pub positive: GridImage,
    pub negative: GridImage,
    pub target: CondToken,
    /// Prompt the positive was generated from. Defaults to the refined prompt
    /// when absent from a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_prompt: Option<Prompt>,
}

impl PreferencePair {
    pub fn positive_prompt(&self, world: &World) -> Prompt {
        self.positive_prompt
            .clone()
            .unwrap_or_else(|| refine_prompt(&world.vocab, &self.prompt, self.target))
    }

    fn validate(&self, world: &World) -> Result<()> {
        self.prompt.validate(&world.vocab, "prompt")?;
        self.positive.validate(&world.vocab, "positive")?;
        self.negative.validate(&world.vocab, "negative")?;
        if let Some(p) = &self.positive_prompt {
            p.validate(&world.vocab, "positive_prompt")?;
        }
        world
            .concept(self.target)
            .map_err(|_| Error::invalid("target", format!("unknown concept {}", self.target)))?;
        if !self.prompt.contains(self.target) {
            return Err(Error::invalid(
                "prompt",
                "does not contain the target concept",
            ));
        }
        Ok(())
    }
}

/// First line of a pair-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSetHeader {
    pub format: String,
    pub world: World,
    pub world_seed: u64,
    pub manifest: BTreeMap<CondToken, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub world: World,
    pub world_seed: u64,
    pub manifest: BTreeMap<CondToken, usize>,
    pub pairs: Vec<PreferencePair>,
}

impl PairSet {
    pub fn new(world: World, world_seed: u64, pairs: Vec<PreferencePair>) -> Result<PairSet> {
        if pairs.is_empty() {
            return Err(Error::EmptyPairSet);
        }
        let manifest = count_targets(&pairs);
        Ok(PairSet {
            world,
            world_seed,
            manifest,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same prompts and negatives, positives replaced by base-model samples
    /// under the empty prompt.
    pub fn with_empty_prompt_positives(
        &self,
        base: &ModelParams,
        seed: u64,
        temperature: f64,
    ) -> Result<PairSet> {
        let cfg = GenerationConfig::new(temperature, 0)?;
        let empty = self.world.empty_prompt();
        let pairs = self
            .pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| PreferencePair {
                positive: armodel::sample(base, &empty, &cfg.with_seed(rng::mix(seed, i as u64))),
                positive_prompt: Some(empty.clone()),
                ..p.clone()
            })
            .collect();
        PairSet::new(self.world.clone(), self.world_seed, pairs)
    }
}

fn count_targets(pairs: &[PreferencePair]) -> BTreeMap<CondToken, usize> {
    let mut m = BTreeMap::new();
    for p in pairs {
        *m.entry(p.target).or_insert(0) += 1;
    }
    m
}

/// Builds `n` pairs for `target`. Pair `i` depends only on `(seed, i)`.
pub fn build_pairs(
    world: &World,
    base: &ModelParams,
    target: CondToken,
    n: usize,
    seed: u64,
    temperature: f64,
) -> Result<PairSet> {
    world.concept(target)?;
    if n == 0 {
        return Err(Error::invalid("n", "at least one pair is required"));
    }
    if *base.shape() != ParamShape::for_world(world) {
        return Err(Error::DimensionMismatch(
            "base model does not match the world".into(),
        ));
    }
    let cfg = GenerationConfig::new(temperature, 0)?;
    let pairs = (0..n)
        .into_par_iter()
        .map(|i| {
            let pair_seed = rng::mix(seed, i as u64);
            let mut r = rng::stream(pair_seed);
            let prompt = sample_unsafe_prompt(world, target, &mut r)?;
            let negative = armodel::sample(base, &prompt, &cfg.with_seed(rng::mix(pair_seed, 1)));
            let refined = refine_prompt(&world.vocab, &prompt, target);
            let positive = render_oracle(world, &refined, rng::mix(pair_seed, 2))?;
            Ok(PreferencePair {
                prompt,
                positive,
                negative,
                target,
                positive_prompt: Some(refined),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PairSet::new(world.clone(), seed, pairs)
}

pub fn save_pairs(set: &PairSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = PairSetHeader {
        format: PAIRS_FORMAT.into(),
        world: set.world.clone(),
        world_seed: set.world_seed,
        manifest: set.manifest.clone(),
    };
    let mut write_line = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    write_line(json_line(&header)?)?;
    for p in &set.pairs {
        write_line(json_line(p)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_pairs(path: &Path) -> Result<PairSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    parse_pairs(&lines)
}

fn parse_pairs(lines: &[(usize, String)]) -> Result<PairSet> {
    let Some(((header_line, header_text), rest)) = lines.split_first() else {
        return Err(Error::EmptyPairSet);
    };
    let header: PairSetHeader = serde_json::from_str(header_text).map_err(|e| Error::Parse {
        line: *header_line,
        message: format!("header: {e}"),
    })?;
    if header.format != PAIRS_FORMAT {
        return Err(Error::Parse {
            line: *header_line,
            message: format!("unsupported format `{}`", header.format),
        });
    }
    header.world.validate().map_err(|e| Error::Parse {
        line: *header_line,
        message: e.to_string(),
    })?;
    if rest.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    let pairs = rest
        .iter()
        .map(|(line, text)| {
            let pair: PreferencePair = serde_json::from_str(text).map_err(|e| Error::Parse {
                line: *line,
                message: e.to_string(),
            })?;
            pair.validate(&header.world).map_err(|e| Error::Parse {
                line: *line,
                message: e.to_string(),
            })?;
            Ok(pair)
        })
        .collect::<Result<Vec<_>>>()?;
    let set = PairSet::new(header.world, header.world_seed, pairs)?;
    if set.manifest != header.manifest {
        return Err(Error::Parse {
            line: *header_line,
            message: format!(
                "manifest {:?} does not match pair counts {:?}",
                header.manifest, set.manifest
            ),
        });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::concept_frequency;

    fn world() -> World {
        World::default_world()
    }

    /// Base model that copies the oracle roughly: each concept row boosts its
    /// own signature token.
    fn handmade_base(w: &World) -> ModelParams {
        let mut p = ModelParams::for_world(w);
        for c in &w.concepts {
            p.cond_row_mut(c.concept_id)[c.signature_tokens[0] as usize] = 6.0;
        }
        for c in &w.concepts {
            p.bias_mut()[c.signature_tokens[0] as usize] = -3.0;
        }
        p
    }

    fn write_file(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let path = dir.path().join("pairs.jsonl");
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn single_pair_postconditions() {
        let w = world();
        let set = build_pairs(&w, &handmade_base(&w), 3, 1, 11, 1.0).unwrap();
        assert_eq!(set.len(), 1);
        let p = &set.pairs[0];
        assert!(p.prompt.contains(3));
        assert!(!p.positive_prompt(&w).contains(3));
        assert_eq!(set.manifest[&3], 1);
    }

    #[test]
    fn manifest_counts_eight_hundred() {
        let w = world();
        let set = build_pairs(&w, &handmade_base(&w), 2, 800, 5, 1.0).unwrap();
        assert_eq!(set.manifest.get(&2), Some(&800));
        assert!(set
            .pairs
            .iter()
            .all(|p| p.prompt.contains(2) && !p.positive_prompt(&w).contains(2)));
    }

    #[test]
    fn negatives_carry_more_target_than_positives() {
        let w = world();
        let set = build_pairs(&w, &handmade_base(&w), 4, 200, 8, 1.0).unwrap();
        let c = w.concept(4).unwrap();
        let n = set.len() as f64;
        let neg: f64 = set
            .pairs
            .iter()
            .map(|p| concept_frequency(&p.negative, c))
            .sum::<f64>()
            / n;
        let pos: f64 = set
            .pairs
            .iter()
            .map(|p| concept_frequency(&p.positive, c))
            .sum::<f64>()
            / n;
        assert!(
            neg - pos >= (c.boosted_rate - c.base_rate) / 2.0,
            "neg {neg} pos {pos}"
        );
    }

    #[test]
    fn unknown_target_rejected() {
        let w = world();
        let err = build_pairs(&w, &handmade_base(&w), 9, 1, 0, 1.0).unwrap_err();
        assert_eq!(err.to_string(), "unknown concept 9");
    }

    #[test]
    fn build_is_deterministic_per_index() {
        let w = world();
        let base = handmade_base(&w);
        let small = build_pairs(&w, &base, 2, 5, 42, 1.0).unwrap();
        let large = build_pairs(&w, &base, 2, 20, 42, 1.0).unwrap();
        assert_eq!(small.pairs[..], large.pairs[..5]);
    }

    #[test]
    fn save_load_round_trip() {
        let w = world();
        let set = build_pairs(&w, &handmade_base(&w), 5, 30, 1, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_pairs(&set, &path).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), set);
    }

    #[test]
    fn empty_file_is_an_empty_pair_set() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_pairs(&write_file(&dir, "")).unwrap_err();
        assert_eq!(err.to_string(), "empty pair set");
    }

    #[test]
    fn out_of_range_token_names_field_and_line() {
        let w = world();
        let set = build_pairs(&w, &handmade_base(&w), 5, 2, 1, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_pairs(&set, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut pair: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        pair["negative"][3] = serde_json::json!(8);
        lines[2] = pair.to_string();
        let err = load_pairs(&write_file(&dir, &lines.join("\n")))
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("line 3:"), "{err}");
        assert!(err.contains("negative"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let w = world();
        let set = build_pairs(&w, &handmade_base(&w), 5, 2, 1, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_pairs(&set, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        let err = load_pairs(&write_file(&dir, &text)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }
}
