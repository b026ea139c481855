use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use erasure_core::eval::{
    self, EvalSettings, PromptedModel, SafeGuidance, IMAGES_PER_CLASS, IMAGES_PER_PROMPT,
};
use erasure_core::synthworld::{self, load_pairs, save_pairs, single_concept_prompt};
use erasure_core::trainer::{self, read_curves, record_curves, PRETRAIN_CORPUS};
use erasure_core::{
    rng, DpoConfig, EvalMode, Method, ModelParams, PairSet, Preset, TrainConfig, TrainOutcome,
    World,
};

use crate::manifest::RunManifest;
use crate::{Common, EvalFlags, TrainFlags};

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

const WORLD_FILE: &str = "world.toml";
const BASE_FILE: &str = "base.ckpt";
const PAIRS_FILE: &str = "pairs.jsonl";
const PAIR_TEMPERATURE: f64 = 1.0;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn other(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> CliError {
        CliError::other(format!("{}: {e}", path.display()))
    }

    fn validation(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<erasure_core::Error> for CliError {
    fn from(e: erasure_core::Error) -> CliError {
        CliError {
            code: if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_FAILURE
            },
            message: e.to_string(),
        }
    }
}

/// Path of an artifact produced by `stage`, which must already have run.
fn upstream(dir: &Path, file: &str, stage: &str) -> CliResult<PathBuf> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::validation(format!(
            "missing {}: run the `{stage}` stage first",
            path.display()
        )))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_world(dir: &Path) -> CliResult<World> {
    Ok(World::load(&upstream(dir, WORLD_FILE, "world")?)?)
}

fn load_base(dir: &Path, world: &World) -> CliResult<ModelParams> {
    let base = ModelParams::load(&upstream(dir, BASE_FILE, "pretrain")?)?;
    if base.shape() != ModelParams::for_world(world).shape() {
        return Err(CliError::validation(format!(
            "{BASE_FILE} does not match {WORLD_FILE}; rerun `pretrain`"
        )));
    }
    Ok(base)
}

fn load_pair_set(dir: &Path) -> CliResult<PairSet> {
    Ok(load_pairs(&upstream(dir, PAIRS_FILE, "build-pairs")?)?)
}

fn erased_file(label: &str) -> String {
    format!("erased_{label}.ckpt")
}

fn curve_file(label: &str) -> String {
    format!("curve_{label}.csv")
}

pub fn world(common: &Common, config: Option<&Path>) -> CliResult<()> {
    let world = match config {
        Some(path) => World::load(path)?,
        None => World::default_world(),
    };
    world.validate()?;
    create_dir(&common.out)?;
    world.save(&common.out.join(WORLD_FILE))?;
    let mut m = RunManifest::new("world", common.seed, &world);
    if let Some(path) = config {
        m.inputs.push(path.display().to_string());
    }
    m.outputs.push(WORLD_FILE.into());
    m.write(&common.out, "world")?;
    println!(
        "world: V={} C={} L={} concepts={:?} -> {}",
        world.vocab.image_vocab_size,
        world.vocab.cond_vocab_size,
        world.vocab.seq_len,
        world.concept_ids().collect::<Vec<_>>(),
        common.out.join(WORLD_FILE).display()
    );
    Ok(())
}

/// Writes checkpoint and curve; a divergence becomes exit code 3 once the
/// partial results are on disk.
fn save_outcome(
    dir: &Path,
    label: &str,
    ckpt: &str,
    outcome: &TrainOutcome,
    m: &mut RunManifest,
) -> CliResult<()> {
    outcome.params.save(&dir.join(ckpt))?;
    let curve = curve_file(label);
    record_curves(
        &[(label.to_string(), outcome.curve.clone())],
        &dir.join(&curve),
    )?;
    m.outputs.push(ckpt.to_string());
    m.outputs.push(curve);
    if let Some(d) = &outcome.divergence {
        m.notes.push(format!(
            "diverged at iteration {}: {}",
            d.iteration, d.reason
        ));
    }
    Ok(())
}

fn divergence_error(label: &str, outcome: &TrainOutcome) -> CliResult<()> {
    match &outcome.divergence {
        Some(d) => Err(CliError {
            code: EXIT_DIVERGENCE,
            message: format!(
                "{label} diverged at iteration {} ({}); partial results saved",
                d.iteration, d.reason
            ),
        }),
        None => Ok(()),
    }
}

pub fn pretrain(common: &Common) -> CliResult<()> {
    let world = load_world(&common.out)?;
    let outcome = trainer::pretrain_base(&world, common.seed)?;
    let mut m = RunManifest::new("pretrain", common.seed, &world);
    m.method = Some(Method::Pretrain.label().into());
    m.train = Some(TrainConfig::pretrain(rng::mix(common.seed, 1)));
    m.setting("corpus_size", PRETRAIN_CORPUS);
    m.inputs.push(WORLD_FILE.into());
    save_outcome(&common.out, "pretrain", BASE_FILE, &outcome, &mut m)?;
    m.write(&common.out, "pretrain")?;
    let last = outcome.curve.records.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "pretrain: {} iterations, final loss {last:.6}",
        outcome.curve.len()
    );
    divergence_error("pretraining", &outcome)
}

pub fn build_pairs(common: &Common, target: u32, n: usize) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::validation(
            "invalid n: at least one pair is required",
        ));
    }
    let world = load_world(&common.out)?;
    let base = load_base(&common.out, &world)?;
    let set = synthworld::build_pairs(&world, &base, target, n, common.seed, PAIR_TEMPERATURE)?;
    save_pairs(&set, &common.out.join(PAIRS_FILE))?;
    let mut m = RunManifest::new("build-pairs", common.seed, &world);
    m.setting("target", target);
    m.setting("n", n);
    m.setting("temperature", PAIR_TEMPERATURE);
    m.inputs.extend([WORLD_FILE.into(), BASE_FILE.into()]);
    m.outputs.push(PAIRS_FILE.into());
    m.write(&common.out, "pairs")?;
    println!(
        "build-pairs: {n} pairs for concept {target} -> {}",
        common.out.join(PAIRS_FILE).display()
    );
    Ok(())
}

/// Optional preset overrides read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Overrides {
    learning_rate: Option<f64>,
    iterations: Option<usize>,
    batch_size: Option<usize>,
    weight_decay: Option<f64>,
    beta: Option<f64>,
    drop_prob: Option<f64>,
}

fn training_setup(
    flags: &TrainFlags,
    method: Method,
    seed: u64,
) -> CliResult<(TrainConfig, DpoConfig, Vec<String>)> {
    let overrides = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            toml::from_str::<Overrides>(&text)
                .map_err(|e| CliError::validation(format!("{}: {}", path.display(), e.message())))?
        }
        None => Overrides::default(),
    };
    let mut cfg = TrainConfig::preset(flags.preset, method, seed);
    let mut notes = Vec::new();
    if let Some(v) = overrides.learning_rate {
        cfg.learning_rate = v;
        notes.push(format!("learning_rate overridden: {v:?}"));
    }
    if let Some(v) = overrides.iterations {
        cfg.iterations = v;
        notes.push(format!("iterations overridden: {v}"));
    }
    if let Some(v) = overrides.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = overrides.weight_decay {
        cfg.weight_decay = v;
    }
    cfg.validate()?;
    let defaults = DpoConfig::default();
    let dpo = DpoConfig::new(
        flags.beta.or(overrides.beta).unwrap_or(defaults.beta),
        flags
            .drop_prob
            .or(overrides.drop_prob)
            .unwrap_or(defaults.drop_prob),
    )?;
    if method == Method::DpoVanilla {
        notes.push("dpo_vanilla trains with drop_prob 0 and the summed loss".into());
    }
    notes.push("preset iteration counts are kept verbatim; effective compute depends on batch size and pair count".into());
    Ok((cfg, dpo, notes))
}

pub fn erase(common: &Common, method: Method, flags: &TrainFlags) -> CliResult<()> {
    let (cfg, dpo, notes) = training_setup(flags, method, common.seed)?;
    let pairs = load_pair_set(&common.out)?;
    let base = load_base(&common.out, &pairs.world)?;
    let outcome = trainer::erase(&base, &pairs, &cfg, &dpo)?;
    let label = method.label();
    let mut m = RunManifest::new("erase", common.seed, &pairs.world);
    m.method = Some(label.into());
    m.preset = Some(flags.preset.label().into());
    m.train = Some(cfg);
    // What the loss actually used, e.g. drop_prob 0 for dpo_vanilla.
    m.dpo = method.preference_setup(&dpo).map(|(eff, _)| eff);
    m.notes = notes;
    m.inputs.extend([BASE_FILE.into(), PAIRS_FILE.into()]);
    save_outcome(&common.out, label, &erased_file(label), &outcome, &mut m)?;
    m.write(&common.out, &format!("erase_{label}"))?;
    println!(
        "erase: {label} ({} preset, lr {:e}, {} iterations) -> {}",
        flags.preset.label(),
        cfg.learning_rate,
        outcome.curve.len(),
        common.out.join(erased_file(label)).display()
    );
    divergence_error(label, &outcome)
}

fn target_concept(flags: &EvalFlags) -> CliResult<u32> {
    if let Some(t) = flags.target {
        return Ok(t);
    }
    let pairs = load_pair_set(&flags.common.out)?;
    Ok(pairs.pairs[0].target)
}

fn removal_models(
    world: &World,
    base: &ModelParams,
    method: Method,
    seed: u64,
    m: &mut RunManifest,
) -> CliResult<BTreeMap<u32, ModelParams>> {
    let mut models = BTreeMap::new();
    for c in world.concept_ids() {
        let pair_seed = rng::mix(seed, c as u64);
        let pairs = synthworld::build_pairs(world, base, c, 800, pair_seed, PAIR_TEMPERATURE)?;
        let cfg = TrainConfig::preset(Preset::Object, method, seed);
        let outcome = trainer::erase(base, &pairs, &cfg, &DpoConfig::default())?;
        divergence_error(&format!("{} erasing concept {c}", method.label()), &outcome)?;
        models.insert(c, outcome.params);
    }
    m.inputs.push(BASE_FILE.into());
    m.notes.push(format!(
        "removal models: {} with the object preset, 800 pairs per concept",
        method.label()
    ));
    Ok(models)
}

fn score<M: PromptedModel>(
    model: &M,
    world: &World,
    target: u32,
    label: &str,
    settings: &EvalSettings,
) -> CliResult<erasure_core::EvalReport> {
    Ok(eval::evaluate(model, world, target, label, settings)?)
}

pub fn eval(flags: &EvalFlags) -> CliResult<()> {
    let dir = &flags.common.out;
    let seed = flags.common.seed;
    let world = load_world(dir)?;
    let target = target_concept(flags)?;
    world.concept(target)?;
    let settings = EvalSettings {
        mode: if flags.exact {
            EvalMode::Exact
        } else {
            EvalMode::Sampled
        },
        n_samples: flags.samples,
        threshold: flags.threshold,
        images_per_prompt: IMAGES_PER_PROMPT,
        seed,
    };
    let label = flags.method.as_str();
    let mut m = RunManifest::new("eval", seed, &world);
    m.method = Some(label.into());
    m.inputs.push(WORLD_FILE.into());
    let mut report = match label {
        "base" => {
            m.inputs.push(BASE_FILE.into());
            score(&load_base(dir, &world)?, &world, target, label, &settings)?
        }
        "sld" => {
            m.inputs.push(BASE_FILE.into());
            m.setting("guidance_scale", flags.scale);
            let base = load_base(dir, &world)?;
            let guided = SafeGuidance {
                params: &base,
                unsafe_prompt: single_concept_prompt(&world, target),
                empty_prompt: world.empty_prompt(),
                scale: flags.scale,
            };
            score(&guided, &world, target, label, &settings)?
        }
        other => {
            let method = crate::parse_method(other).map_err(CliError::validation)?;
            let file = erased_file(method.label());
            let params =
                ModelParams::load(&upstream(dir, &file, &format!("erase --method {other}"))?)?;
            m.inputs.push(file);
            score(&params, &world, target, label, &settings)?
        }
    };
    if flags.removal {
        let base = load_base(dir, &world)?;
        let models = match label {
            "base" => world.concept_ids().map(|c| (c, base.clone())).collect(),
            "sld" => {
                return Err(CliError::validation(
                    "--removal needs an erasure method, not `sld`",
                ))
            }
            other => {
                let method = crate::parse_method(other).map_err(CliError::validation)?;
                removal_models(&world, &base, method, seed, &mut m)?
            }
        };
        let (table, log) = eval::removal_accuracy(&models, &world, IMAGES_PER_CLASS, seed)?;
        report.accuracy_table = table;
        let log_file = format!("classification_{label}.csv");
        eval::write_classification_log(&world, &log, &dir.join(&log_file))?;
        m.outputs.push(log_file);
    }
    let report_file = format!("report_{label}.json");
    eval::write_report(&report, &dir.join(&report_file))?;
    m.setting("mode", settings.mode);
    m.setting("samples", settings.n_samples);
    m.setting("threshold", settings.threshold);
    m.setting("images_per_prompt", settings.images_per_prompt);
    m.setting("target", target);
    m.outputs.push(report_file.clone());
    m.write(dir, &format!("eval_{label}"))?;
    println!(
        "eval: {label} target {target}: E {:.6} U {:.6} D {:.6} -> {}",
        report.erase_score,
        report.preserve_score,
        report.decouple_score,
        dir.join(report_file).display()
    );
    for row in &report.accuracy_table {
        println!(
            "  erased {}: erased-class acc {:.2} other-class acc {:.2} diff {:.2} ties {}",
            row.erased_concept,
            row.erased_class_accuracy,
            row.other_class_accuracy,
            row.acc_diff,
            row.ties
        );
    }
    Ok(())
}

pub fn curves(common: &Common, labels: &[String]) -> CliResult<()> {
    let dir = &common.out;
    let labels: Vec<String> = if labels.is_empty() {
        let mut found: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                Some(
                    name.strip_prefix("curve_")?
                        .strip_suffix(".csv")?
                        .to_string(),
                )
            })
            .collect();
        found.sort();
        found
    } else {
        labels.to_vec()
    };
    if labels.is_empty() {
        return Err(CliError::validation(format!(
            "no curve files in {}: run the `pretrain` or `erase` stage first",
            dir.display()
        )));
    }
    let mut runs = Vec::new();
    let mut m = RunManifest::new("curves", common.seed, &load_world(dir)?);
    for label in &labels {
        let file = curve_file(label);
        let stage = if label == "pretrain" {
            "pretrain".to_string()
        } else {
            format!("erase --method {label}")
        };
        runs.extend(read_curves(&upstream(dir, &file, &stage)?)?);
        m.inputs.push(file);
    }
    record_curves(&runs, &dir.join("curves.csv"))?;
    m.outputs.push("curves.csv".into());
    m.write(dir, "curves")?;
    println!(
        "curves: {} runs -> {}",
        runs.len(),
        dir.join("curves.csv").display()
    );
    Ok(())
}

pub const ABLATION_ROWS: [&str; 5] = ["ft", "dpo_vanilla", "dpo_drop", "vce", "wo_data"];

pub fn ablate(common: &Common, flags: &TrainFlags) -> CliResult<()> {
    let dir = &common.out;
    let pairs = load_pair_set(dir)?;
    let world = pairs.world.clone();
    let base = load_base(dir, &world)?;
    let target = pairs.pairs[0].target;
    let wo_data = pairs.with_empty_prompt_positives(&base, common.seed, PAIR_TEMPERATURE)?;
    let mut table = String::from("method,erase,preserve,decouple\n");
    let mut curves = Vec::new();
    let mut m = RunManifest::new("ablate", common.seed, &world);
    let (vce_cfg, dpo, notes) = training_setup(flags, Method::Vce, common.seed)?;
    m.preset = Some(flags.preset.label().into());
    m.train = Some(vce_cfg);
    m.dpo = Some(dpo);
    m.notes = notes;
    m.inputs.extend([BASE_FILE.into(), PAIRS_FILE.into()]);
    println!("{:<12} {:>12} {:>12} {:>12}", "method", "E", "U", "D");
    for row in ABLATION_ROWS {
        let (method, set) = match row {
            "wo_data" => (Method::Vce, &wo_data),
            other => (other.parse::<Method>()?, &pairs),
        };
        let (cfg, dpo, _) = training_setup(flags, method, common.seed)?;
        let outcome = trainer::erase(&base, set, &cfg, &dpo)?;
        divergence_error(row, &outcome)?;
        let s = eval::score_erasure(
            &outcome.params,
            &world,
            target,
            0,
            common.seed,
            EvalMode::Exact,
        )?;
        let _ = writeln!(
            table,
            "{row},{:?},{:?},{:?}",
            s.erase, s.preserve, s.decouple
        );
        println!(
            "{row:<12} {:>12.8} {:>12.8} {:>12.8}",
            s.erase, s.preserve, s.decouple
        );
        curves.push((row.to_string(), outcome.curve));
    }
    m.setting("target", target);
    m.setting("scores", "exact");
    m.notes
        .push("wo_data: vce on pairs whose positives are empty-prompt base samples".into());
    write_text(&dir.join("ablation.csv"), &table)?;
    record_curves(&curves, &dir.join("curves_ablation.csv"))?;
    m.outputs
        .extend(["ablation.csv".into(), "curves_ablation.csv".into()]);
    m.write(dir, "ablate")?;
    Ok(())
}
