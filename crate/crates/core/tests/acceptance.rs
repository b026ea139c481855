//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use erasure_core::armodel::seq_log_prob;
use erasure_core::eval::{self, eval_prompts, score_erasure, EvalSettings};
use erasure_core::losses::{dpo_avg_loss, dpo_loss, token_drop};
use erasure_core::rng;
use erasure_core::synthworld::{build_pairs, save_pairs};
use erasure_core::trainer::{self, grad_check, record_curves, LossKind, ParamInit};
use erasure_core::{
    DpoConfig, EvalMode, GridImage, Method, ModelParams, PairSet, PreferencePair, Preset, Prompt,
    TrainConfig, World, DEFAULT_SEED,
};
use rand::Rng;

const TARGET: u32 = 2;
const PAIRS: usize = 800;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_params(world: &World, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::for_world(world);
    let mut r = rng::stream(seed);
    p.as_mut_slice()
        .iter_mut()
        .for_each(|x| *x = r.gen_range(-scale..scale));
    p
}

fn random_image(world: &World, r: &mut impl Rng) -> GridImage {
    GridImage(
        (0..world.vocab.seq_len)
            .map(|_| r.gen_range(0..world.vocab.image_vocab_size as u32))
            .collect(),
    )
}

fn random_prompt(world: &World, r: &mut impl Rng) -> Prompt {
    // Any condition token except `<drop>`.
    let allowed: Vec<u32> = (0..world.vocab.cond_vocab_size as u32)
        .filter(|&t| t != world.vocab.drop_token)
        .collect();
    Prompt(
        (0..world.vocab.prompt_len)
            .map(|_| allowed[r.gen_range(0..allowed.len())])
            .collect(),
    )
}

fn random_pair(world: &World, r: &mut impl Rng) -> PreferencePair {
    let mut prompt = random_prompt(world, r);
    prompt.0[0] = TARGET;
    PreferencePair {
        prompt,
        positive: random_image(world, r),
        negative: random_image(world, r),
        target: TARGET,
        positive_prompt: None,
    }
}

fn max_abs_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn gradient_correctness() -> Outcome {
    let world = World::micro(4);
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut ok = true;
    for (k, kind) in LossKind::ALL.iter().enumerate() {
        match grad_check(
            &world,
            *kind,
            ParamInit::Random,
            20,
            1e-6,
            DEFAULT_SEED + k as u64,
        ) {
            Ok(report) => {
                ok &= report.passed;
                worst.push(format!("{}={:.1e}", kind.label(), report.worst()));
            }
            Err(e) => return outcome(false, format!("{}: {e}", kind.label())),
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(30);
    outcome(
        ok,
        format!(
            "max rel err {} (tol 1e-6, 20 trials each) in {:.2?}",
            worst.join(" "),
            elapsed
        ),
    )
}

fn loss_identities() -> Outcome {
    let world = World::micro(4);
    let vocab = &world.vocab;
    let l = vocab.seq_len as f64;
    let mut r = rng::stream(DEFAULT_SEED ^ 2);
    let cfg = DpoConfig::new(0.1, 0.1).unwrap();
    let mut at_ref = 0.0f64;
    let mut value_gap = 0.0f64;
    let mut grad_gap = 0.0f64;
    for i in 0..100u64 {
        let theta = random_params(&world, rng::mix(DEFAULT_SEED, i), 1.0);
        let reference = random_params(&world, rng::mix(DEFAULT_SEED, 1000 + i), 1.0);
        let pair = random_pair(&world, &mut r);
        for f in [dpo_loss, dpo_avg_loss] {
            let v = f(&theta, &theta, &pair, vocab, &cfg, i).unwrap().value;
            at_ref = at_ref.max((v - std::f64::consts::LN_2).abs());
        }
        let avg = dpo_avg_loss(&theta, &reference, &pair, vocab, &cfg, i).unwrap();
        let scaled = DpoConfig::new(cfg.beta / l, cfg.drop_prob).unwrap();
        let sum = dpo_loss(&theta, &reference, &pair, vocab, &scaled, i).unwrap();
        value_gap = value_gap.max((avg.value - sum.value).abs());
        grad_gap = grad_gap.max(max_abs_diff(&avg.grad, &sum.grad));
    }
    outcome(
        at_ref <= 1e-9 && value_gap <= 1e-12 && grad_gap <= 1e-12,
        format!("|L(ref)-ln2| {at_ref:.1e} (tol 1e-9); avg vs scaled: value {value_gap:.1e}, grad {grad_gap:.1e} (tol 1e-12)"),
    )
}

fn likelihood_normalization() -> Outcome {
    let world = World::micro(3);
    let v = world.vocab.image_vocab_size as u32;
    let mut r = rng::stream(DEFAULT_SEED ^ 3);
    let mut worst = 0.0f64;
    for draw in 0..10u64 {
        let params = random_params(&world, rng::mix(DEFAULT_SEED ^ 3, draw), 2.0);
        let prompt = random_prompt(&world, &mut r);
        let mut total = 0.0;
        for code in 0..v.pow(3) {
            let image = GridImage(vec![code % v, (code / v) % v, code / (v * v)]);
            total += seq_log_prob(&params, &image, &prompt).exp();
        }
        worst = worst.max((total - 1.0).abs());
    }
    outcome(
        worst <= 1e-9,
        format!("max |sum - 1| over 64 sequences x 10 draws: {worst:.1e} (tol 1e-9)"),
    )
}

fn token_drop_statistics() -> Outcome {
    let world = World::default_world();
    let vocab = &world.vocab;
    let mut r = rng::stream(DEFAULT_SEED ^ 4);
    let prompts: Vec<Prompt> = (0..1000).map(|_| random_prompt(&world, &mut r)).collect();
    let identity = prompts
        .iter()
        .enumerate()
        .all(|(i, p)| token_drop(vocab, p, 0.0, i as u64) == *p);
    let all_drop = prompts.iter().enumerate().all(|(i, p)| {
        token_drop(vocab, p, 1.0, i as u64)
            .tokens()
            .iter()
            .all(|&t| t == vocab.drop_token)
    });
    let mut dropped = 0usize;
    let mut total = 0usize;
    let mut i = 0u64;
    while total < 100_000 {
        let p = random_prompt(&world, &mut r);
        let q = token_drop(vocab, &p, 0.3, rng::mix(DEFAULT_SEED, i));
        dropped += q
            .tokens()
            .iter()
            .filter(|&&t| t == vocab.drop_token)
            .count();
        total += q.tokens().len();
        i += 1;
    }
    let rate = dropped as f64 / total as f64;
    outcome(
        identity && all_drop && (rate - 0.3).abs() <= 0.005,
        format!("p=0 identity {identity}, p=1 all-drop {all_drop}, p=0.3 rate {rate:.4} over {total} tokens (tol 0.005)"),
    )
}

fn mean_expectation(params: &ModelParams, world: &World, concept: u32, prompts: &[Prompt]) -> f64 {
    eval::mean_expectation(params, world, concept, prompts).unwrap()
}

fn end_to_end_erasure() -> Outcome {
    let start = Instant::now();
    let world = World::default_world();
    let base = trainer::pretrain_base(&world, DEFAULT_SEED).unwrap().params;
    let pairs = build_pairs(&world, &base, TARGET, PAIRS, DEFAULT_SEED, 1.0).unwrap();
    let cfg = TrainConfig::preset(Preset::Style, Method::Vce, DEFAULT_SEED);
    let erased = trainer::erase(&base, &pairs, &cfg, &DpoConfig::default())
        .unwrap()
        .params;
    let target_prompts = eval_prompts(&world, TARGET, &[]);
    let before = mean_expectation(&base, &world, TARGET, &target_prompts);
    let after = mean_expectation(&erased, &world, TARGET, &target_prompts);
    let reduction = 1.0 - after / before;
    let mut worst_drift = 0.0f64;
    for c in world.concept_ids().filter(|&c| c != TARGET) {
        let prompts = eval_prompts(&world, c, &[TARGET]);
        let b = mean_expectation(&base, &world, c, &prompts);
        let a = mean_expectation(&erased, &world, c, &prompts);
        worst_drift = worst_drift.max(((a - b) / b).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        reduction >= 0.70 && worst_drift <= 0.10 && elapsed < Duration::from_secs(120),
        format!(
            "target expectation {before:.6} -> {after:.6}, reduction {:.3}% (need >= 70%); worst non-target drift {:.3}% (need <= 10%); {:.2?}",
            100.0 * reduction,
            100.0 * worst_drift,
            elapsed
        ),
    )
}

struct AblationRun {
    seed: u64,
    decouple: [f64; 4],
    preserve_vce: f64,
    preserve_wo_data: f64,
}

const ABLATION_METHODS: [Method; 4] =
    [Method::Vce, Method::DpoDrop, Method::DpoVanilla, Method::Ft];

fn ablation_run(seed: u64) -> AblationRun {
    let world = World::default_world();
    let base = trainer::pretrain_base(&world, seed).unwrap().params;
    let pairs = build_pairs(&world, &base, TARGET, PAIRS, seed, 1.0).unwrap();
    let score = |pairs: &PairSet, method: Method| {
        let cfg = TrainConfig::preset(Preset::Style, method, seed);
        let erased = trainer::erase(&base, pairs, &cfg, &DpoConfig::default())
            .unwrap()
            .params;
        score_erasure(&erased, &world, TARGET, 0, seed, EvalMode::Exact).unwrap()
    };
    let scores: Vec<_> = ABLATION_METHODS.iter().map(|&m| score(&pairs, m)).collect();
    let wo_data = pairs.with_empty_prompt_positives(&base, seed, 1.0).unwrap();
    let wo = score(&wo_data, Method::Vce);
    AblationRun {
        seed,
        decouple: [
            scores[0].decouple,
            scores[1].decouple,
            scores[2].decouple,
            scores[3].decouple,
        ],
        preserve_vce: scores[0].preserve,
        preserve_wo_data: wo.preserve,
    }
}

fn ablation_ordering(runs: &[AblationRun]) -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for run in runs {
        let [vce, drop, vanilla, ft] = run.decouple;
        let ok = vce > drop && drop >= vanilla && vanilla > ft;
        wins += ok as usize;
        notes.push(format!(
            "seed {}: vce {vce:.8} dpo_drop {drop:.8} dpo_vanilla {vanilla:.8} ft {ft:.8} [{}]",
            run.seed,
            if ok { "ordered" } else { "not ordered" }
        ));
    }
    outcome(
        wins >= 2,
        format!("{wins}/3 seeds ordered (need >= 2); {}", notes.join("; ")),
    )
}

fn data_construction(runs: &[AblationRun]) -> Outcome {
    let wins = runs
        .iter()
        .filter(|r| r.preserve_vce > r.preserve_wo_data)
        .count();
    let notes: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: U vce {:.8} wo_data {:.8}",
                r.seed, r.preserve_vce, r.preserve_wo_data
            )
        })
        .collect();
    outcome(
        wins >= 2,
        format!("{wins}/3 seeds (need >= 2); {}", notes.join("; ")),
    )
}

fn artifact_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stability() -> Outcome {
    let world = World::default_world();
    let base = trainer::pretrain_base(&world, DEFAULT_SEED).unwrap().params;
    let pairs = build_pairs(&world, &base, TARGET, PAIRS, DEFAULT_SEED, 1.0).unwrap();
    let run = |method| {
        let cfg = TrainConfig::preset(Preset::Explicit, method, DEFAULT_SEED);
        trainer::erase(&base, &pairs, &cfg, &DpoConfig::default()).unwrap()
    };
    let avg = run(Method::Vce);
    let vanilla = run(Method::DpoVanilla);
    let path = artifact_dir().join("stability_curves.csv");
    let written = record_curves(
        &[
            ("dpo_avg".to_string(), avg.curve.clone()),
            ("dpo_vanilla".to_string(), vanilla.curve.clone()),
        ],
        &path,
    )
    .is_ok();
    let finite = avg
        .curve
        .records
        .iter()
        .all(|r| r.loss.is_finite() && r.grad_maxnorm.is_finite());
    let ok = avg.divergence.is_none() && avg.curve.len() == 500 && finite && written;
    outcome(
        ok,
        format!(
            "dpo_avg {} iterations, finite {finite}, divergence {:?}; dpo_vanilla {} iterations, divergence {:?}; curves at {}",
            avg.curve.len(),
            avg.divergence,
            vanilla.curve.len(),
            vanilla.divergence,
            path.display()
        ),
    )
}

/// world -> pretrain -> pairs -> erase -> eval, every artifact written to `dir`.
fn pipeline(dir: &Path, seed: u64) {
    let world = World::default_world();
    world.save(&dir.join("world.toml")).unwrap();
    let base = trainer::pretrain_base(&world, seed).unwrap();
    base.params.save(&dir.join("base.ckpt")).unwrap();
    let pairs = build_pairs(&world, &base.params, TARGET, PAIRS, seed, 1.0).unwrap();
    save_pairs(&pairs, &dir.join("pairs.jsonl")).unwrap();
    let cfg = TrainConfig::preset(Preset::Style, Method::Vce, seed);
    let erased = trainer::erase(&base.params, &pairs, &cfg, &DpoConfig::default()).unwrap();
    erased.params.save(&dir.join("erased.ckpt")).unwrap();
    record_curves(
        &[
            ("pretrain".into(), base.curve),
            ("vce".into(), erased.curve),
        ],
        &dir.join("curves.csv"),
    )
    .unwrap();
    let settings = EvalSettings {
        mode: EvalMode::Sampled,
        n_samples: 2000,
        seed,
        ..EvalSettings::default()
    };
    let report = eval::evaluate(&erased.params, &world, TARGET, "vce", &settings).unwrap();
    eval::write_report(&report, &dir.join("report.json")).unwrap();
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), DEFAULT_SEED);
    pipeline(b.path(), DEFAULT_SEED);
    let files = [
        "world.toml",
        "base.ckpt",
        "pairs.jsonl",
        "erased.ckpt",
        "curves.csv",
        "report.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap()
        })
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", files.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

fn oracle_agreement() -> Outcome {
    let world = World::default_world();
    let mut worst = 0.0f64;
    let mut ok = true;
    for m in 0..5u64 {
        let params = random_params(&world, rng::mix(DEFAULT_SEED ^ 10, m), 1.5);
        let exact = score_erasure(&params, &world, TARGET, 0, 0, EvalMode::Exact).unwrap();
        let sampled = score_erasure(
            &params,
            &world,
            TARGET,
            10_000,
            rng::mix(DEFAULT_SEED, m),
            EvalMode::Sampled,
        )
        .unwrap();
        for (s, e, se) in [
            (sampled.erase, exact.erase, sampled.erase_stderr),
            (sampled.preserve, exact.preserve, sampled.preserve_stderr),
            (sampled.decouple, exact.decouple, sampled.decouple_stderr),
        ] {
            let z = (s - e).abs() / se;
            worst = worst.max(z);
            ok &= z <= 3.0;
        }
    }
    outcome(
        ok,
        format!("worst |sampled - exact| = {worst:.2} sigma over 5 models x 3 scores (need <= 3)"),
    )
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let runs: Vec<AblationRun> = (0..3).map(|k| ablation_run(DEFAULT_SEED + k)).collect();
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("loss identities", Box::new(loss_identities)),
        (
            "likelihood normalization",
            Box::new(likelihood_normalization),
        ),
        ("token drop statistics", Box::new(token_drop_statistics)),
        ("end-to-end erasure", Box::new(end_to_end_erasure)),
        ("ablation ordering", Box::new(|| ablation_ordering(&runs))),
        (
            "data construction ablation",
            Box::new(|| data_construction(&runs)),
        ),
        ("stability", Box::new(stability)),
        ("determinism", Box::new(determinism)),
        ("evaluation oracle agreement", Box::new(oracle_agreement)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += !o.passed as usize;
        println!(
            "{} {:>2} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
