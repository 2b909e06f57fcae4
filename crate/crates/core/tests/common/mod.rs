#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use alignlab::autodiff::{causal_mask, check_gradients, GradCheck, Graph, Tensor, Var};
use alignlab::config::RunConfig;
use alignlab::data::{pack_lengths, synth_utterance, DynamicBatcher, Manifest, ManifestEntry, Split, SynthSpec};
use alignlab::eval::{align, edit_distance};
use alignlab::nn::{Group, ModelConfig, PipelineModel};
use alignlab::pipeline::{forward_loss, loss_and_grads, Sample};
use alignlab::train::{run_stage, TrainData, TrainState};
use alignlab::workflow;
use alignlab::Result;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

type Case = (&'static str, Vec<Tensor>, fn(&mut Graph<'_>, &[Var]) -> Result<Var>);

/// Every differentiable op, then three composed graphs.
pub fn gradient_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![randn(&[3, 4], 1), randn(&[4, 2], 2)], |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", vec![randn(&[3, 4], 3), randn(&[5, 4], 4)], |g, v| g.matmul_nt(v[0], v[1])),
        ("transpose", vec![randn(&[3, 4], 5)], |g, v| g.transpose(v[0])),
        ("add", vec![randn(&[2, 3], 6), randn(&[2, 3], 7)], |g, v| g.add(v[0], v[1])),
        ("sub", vec![randn(&[2, 3], 8), randn(&[2, 3], 9)], |g, v| g.sub(v[0], v[1])),
        ("add_row", vec![randn(&[3, 4], 10), randn(&[4], 11)], |g, v| g.add_row(v[0], v[1])),
        ("mul", vec![randn(&[2, 3], 12), randn(&[2, 3], 13)], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![randn(&[2, 3], 14)], |g, v| g.scale(v[0], -1.7)),
        ("gelu", vec![randn(&[3, 3], 15)], |g, v| g.gelu(v[0])),
        (
            "layer_norm",
            vec![randn(&[3, 5], 16), randn(&[5], 17), randn(&[5], 18)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        ("softmax_rows", vec![randn(&[3, 4], 19)], |g, v| g.softmax_rows(v[0])),
        ("mask_fill", vec![randn(&[3, 3], 20)], |g, v| {
            let m = g.mask_fill(v[0], causal_mask(3))?;
            g.softmax_rows(m)
        }),
        ("embedding", vec![randn(&[5, 3], 21)], |g, v| g.embedding(v[0], &[4, 0, 4, 2])),
        ("concat_rows", vec![randn(&[2, 3], 22), randn(&[1, 3], 23)], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        }),
        ("concat_cols", vec![randn(&[2, 3], 24), randn(&[2, 2], 25)], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }),
        ("slice_cols", vec![randn(&[3, 5], 26)], |g, v| g.slice_cols(v[0], 1, 3)),
        ("stack_frames", vec![randn(&[5, 2], 27)], |g, v| g.stack_frames(v[0], 2)),
        ("sum", vec![randn(&[2, 4], 28)], |g, v| g.sum(v[0])),
        ("mean", vec![randn(&[2, 4], 29)], |g, v| g.mean(v[0])),
        ("cross_entropy_masked", vec![randn(&[4, 5], 30)], |g, v| {
            g.cross_entropy_masked(v[0], &[1, 4, 0, 2], &[true, false, true, true])
        }),
        ("mse", vec![randn(&[2, 3], 31)], |g, v| g.mse(v[0], &[0.5, -1.0, 0.0, 2.0, 0.1, 0.3])),
        (
            "composed: attention block",
            vec![randn(&[4, 6], 32), randn(&[6, 6], 33), randn(&[6, 6], 34), randn(&[6, 6], 35), randn(&[6], 36)],
            |g, v| {
                let q = g.matmul(v[0], v[1])?;
                let k = g.matmul(v[0], v[2])?;
                let val = g.matmul(v[0], v[3])?;
                let s = g.matmul_nt(q, k)?;
                let s = g.scale(s, 1.0 / 6f64.sqrt())?;
                let s = g.mask_fill(s, causal_mask(4))?;
                let a = g.softmax_rows(s)?;
                let o = g.matmul(a, val)?;
                let o = g.add(o, v[0])?;
                let ones = g.constant(1, 6, vec![1.0; 6])?;
                let gamma = g.add_row(v[4], ones)?;
                let beta = g.scale(v[4], 0.0)?;
                g.layer_norm(o, gamma, beta, 1e-5)
            },
        ),
        (
            "composed: feed-forward classifier",
            vec![randn(&[5, 4], 37), randn(&[4, 8], 38), randn(&[8], 39), randn(&[8, 6], 40)],
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_row(h, v[2])?;
                let h = g.gelu(h)?;
                let logits = g.matmul(h, v[3])?;
                g.cross_entropy_masked(logits, &[0, 5, 3, 1, 2], &[true; 5])
            },
        ),
        (
            "composed: adapted embedding sequence",
            vec![randn(&[7, 4], 41), randn(&[4, 4], 42), randn(&[2, 4], 43), randn(&[4, 2], 44), randn(&[6, 2], 45)],
            |g, v| {
                let e = g.embedding(v[0], &[3, 1, 6, 2])?;
                let base = g.matmul_nt(e, v[1])?;
                let down = g.matmul_nt(e, v[2])?;
                let up = g.matmul_nt(down, v[3])?;
                let up = g.scale(up, 4.0)?;
                let h = g.add(base, up)?;
                let speech = g.stack_frames(v[4], 2)?;
                let speech = g.slice_cols(speech, 0, 4)?;
                let x = g.concat_rows(&[speech, h])?;
                let logits = g.matmul_nt(x, v[0])?;
                g.cross_entropy_masked(logits, &[0, 0, 0, 1, 6, 2, 5], &[false, false, true, true, true, true, false])
            },
        ),
    ]
}

/// Runs every gradient case; returns `(name, report)` pairs.
pub fn gradient_suite() -> Result<Vec<(&'static str, GradCheck)>> {
    gradient_cases()
        .into_iter()
        .map(|(name, inputs, f)| check_gradients(&inputs, f, FD_STEP).map(|r| (name, r)))
        .collect()
}

fn manifest_strategy() -> impl Strategy<Value = (Vec<(usize, u32)>, usize, u64)> {
    (
        prop::collection::vec((1usize..=10, 1u32..=3), 1..40),
        1usize..2500,
        any::<u64>(),
    )
}

fn manifest_of(items: &[(usize, u32)]) -> Manifest {
    let entries = items
        .iter()
        .enumerate()
        .map(|(i, &(chars, weight))| ManifestEntry {
            utt_id: format!("u{i:04}"),
            transcript: "a".repeat(chars),
            seed: i as u64,
            weight,
            split: Split::Train,
        })
        .collect();
    Manifest::new(entries).expect("valid manifest")
}

/// Cap, weight-multiset and determinism properties of the dynamic batcher.
pub fn batcher_properties(cases: u32) -> std::result::Result<(), String> {
    let spec = SynthSpec::default();
    let per_char = spec.frames_per_char * spec.d_feat;
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&manifest_strategy(), |(items, cap, seed)| {
            let m = manifest_of(&items);
            let b = DynamicBatcher::new(cap).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let batches = b.pack_batches(&m, &spec, seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
            for batch in &batches {
                prop_assert!(!batch.is_empty());
                let max = batch.iter().map(|&i| items[i].0 * per_char).max().unwrap_or(0);
                prop_assert!(batch.len() * max <= cap || batch.len() == 1, "batch {batch:?} exceeds cap {cap}");
            }
            let mut seen = vec![0u32; items.len()];
            batches.iter().flatten().for_each(|&i| seen[i] += 1);
            prop_assert_eq!(seen, items.iter().map(|&(_, w)| w).collect::<Vec<_>>());
            prop_assert_eq!(&b.pack_batches(&m, &spec, seed).expect("repack"), &batches);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Plain recursive Levenshtein distance.
pub fn brute_distance(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_distance(ra, rb) + usize::from(x != y);
            sub.min(brute_distance(ra, b) + 1).min(brute_distance(a, rb) + 1)
        }
    }
}

/// DP distance and alignment counts against the brute-force oracle.
pub fn cer_oracle(cases: u32) -> std::result::Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let s = || prop::collection::vec(prop::sample::select(vec!['a', 'b', 'c', 'd']), 0..=6);
    runner
        .run(&(s(), s()), |(a, b)| {
            let want = brute_distance(&a, &b);
            prop_assert_eq!(edit_distance(&a, &b), want);
            let c = align(&a, &b);
            prop_assert_eq!(c.errors(), want);
            prop_assert_eq!(c.ref_len, a.len());
            prop_assert_eq!(c.substitutions + c.deletions + (b.len() - c.insertions - c.substitutions), a.len());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// `pack_lengths` on plain lengths, for callers without a manifest.
pub fn pack(lengths: &[usize], cap: usize) -> Vec<Vec<usize>> {
    pack_lengths(lengths, cap)
}

/// Small corpus prepared once per test binary; training on it takes seconds.
pub fn small_config() -> &'static (RunConfig, tempfile::TempDir) {
    static CELL: OnceLock<(RunConfig, tempfile::TempDir)> = OnceLock::new();
    CELL.get_or_init(|| {
        let tmp = tempfile::tempdir().expect("temp dir");
        let mut cfg = RunConfig::toy();
        cfg.data.dir = tmp.path().join("data");
        cfg.data.corpus.train_single = 24;
        cfg.data.corpus.train_replicated = 8;
        cfg.data.corpus.test_size = 8;
        workflow::prepare_data(&cfg, false).expect("prepare small corpus");
        (cfg, tmp)
    })
}

/// Default toy corpus prepared once per test binary.
pub fn toy_config() -> &'static (RunConfig, tempfile::TempDir) {
    static CELL: OnceLock<(RunConfig, tempfile::TempDir)> = OnceLock::new();
    CELL.get_or_init(|| {
        let tmp = tempfile::tempdir().expect("temp dir");
        let mut cfg = RunConfig::toy();
        cfg.data.dir = tmp.path().join("data");
        workflow::prepare_data(&cfg, false).expect("prepare toy corpus");
        (cfg, tmp)
    })
}

pub fn run_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

/// Criterion outcome: a detail line on success, the reason on failure.
pub type Check = std::result::Result<String, String>;

fn err(e: alignlab::Error) -> String {
    e.to_string()
}

pub fn train_samples(cfg: &RunConfig) -> std::result::Result<(Manifest, Vec<Sample>), String> {
    let m = workflow::load_manifests(cfg).map_err(err)?.train;
    let samples = workflow::load_samples(cfg, Split::Train, &m).map_err(err)?;
    Ok((m, samples))
}

/// Runs `cfg`'s schedule stage by stage; frozen groups must be byte-identical
/// across every stage and `lm_body` across the whole run.
pub fn freeze_soundness(cfg: &RunConfig) -> Check {
    let (manifest, samples) = train_samples(cfg)?;
    let data = TrainData {
        manifest: &manifest,
        samples: &samples,
        spec: &cfg.data.synth,
        batcher: DynamicBatcher::new(cfg.data.batch_cap).map_err(err)?,
    };
    let plan = workflow::train_plan(cfg);
    let mut model = workflow::build_model(cfg).map_err(err)?;
    let body = model.store.serialize_where(|g| g == Group::LmBody);
    let mut state = TrainState::new();
    for (i, st) in plan.schedule.stage.iter().enumerate() {
        let frozen = model.store.serialize_where(|g| !st.groups.contains(&g));
        let trained = model.store.serialize_where(|g| st.groups.contains(&g));
        run_stage(&mut model, &data, &plan, &mut state).map_err(err)?;
        if model.store.serialize_where(|g| !st.groups.contains(&g)) != frozen {
            return Err(format!("stage {} changed a frozen group", i + 1));
        }
        if model.store.serialize_where(|g| st.groups.contains(&g)) == trained {
            return Err(format!("stage {} left its trainable groups unchanged", i + 1));
        }
        state.stage += 1;
        state.epoch = 0;
        state.optimizer = None;
    }
    if model.store.serialize_where(|g| g == Group::LmBody) != body {
        return Err("lm_body changed during the run".into());
    }
    Ok(format!("{} stages, frozen bytes identical, lm_body untouched", plan.schedule.stage.len()))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Two equal-token microbatches at `accum_steps = 2` against their
/// concatenation at `accum_steps = 1`, each on a fresh optimizer.
pub fn accumulation_equivalence(cfg: &RunConfig, tol: f64) -> Check {
    let (_, samples) = train_samples(cfg)?;
    let (a, b) = samples
        .iter()
        .enumerate()
        .find_map(|(i, x)| {
            samples[i + 1..]
                .iter()
                .find(|y| y.transcript.chars().count() == x.transcript.chars().count() && y.transcript != x.transcript)
                .map(|y| (x.clone(), y.clone()))
        })
        .ok_or("no pair of equal-length transcripts")?;
    let mut base = workflow::build_model(cfg).map_err(err)?;
    let stage = cfg.stages.stage.first().ok_or("empty schedule")?;
    base.store.set_trainable(&stage.groups).map_err(err)?;
    let clock = Instant::now();

    let mut two = cfg.optim.clone();
    two.accum_steps = 2;
    let mut m2 = base.clone();
    let ga = loss_and_grads(&m2, std::slice::from_ref(&a)).map_err(err)?;
    let gb = loss_and_grads(&m2, std::slice::from_ref(&b)).map_err(err)?;
    let mut s2 = TrainState::new();
    let first = s2.accumulate_step(&mut m2, &two, &ga.grads, ga.loss, &clock).map_err(err)?;
    let second = s2.accumulate_step(&mut m2, &two, &gb.grads, gb.loss, &clock).map_err(err)?;
    if first || !second {
        return Err("update not applied on the second microbatch".into());
    }

    let mut one = cfg.optim.clone();
    one.accum_steps = 1;
    let mut m1 = base.clone();
    let gc = loss_and_grads(&m1, &[a, b]).map_err(err)?;
    let mut s1 = TrainState::new();
    s1.accumulate_step(&mut m1, &one, &gc.grads, gc.loss, &clock).map_err(err)?;

    let mut grad_diff = 0.0f64;
    for (id, g) in gc.grads.iter() {
        let avg: Vec<f64> = match (ga.grads.get(id), gb.grads.get(id)) {
            (Some(x), Some(y)) => x.iter().zip(y).map(|(x, y)| (x + y) / 2.0).collect(),
            _ => return Err(format!("missing microbatch gradient for {}", m1.store.param(id).name)),
        };
        grad_diff = grad_diff.max(max_diff(&avg, g));
    }
    let mut param_diff = 0.0f64;
    let mut moved = false;
    for ((_, p1), (_, p2)) in m1.store.iter().zip(m2.store.iter()) {
        param_diff = param_diff.max(max_diff(p1.tensor.data(), p2.tensor.data()));
    }
    for ((_, p0), (_, p1)) in base.store.iter().zip(m1.store.iter()) {
        moved |= p0.tensor.data() != p1.tensor.data();
    }
    let (o1, o2) = (s1.optimizer.as_ref().ok_or("no optimizer")?, s2.optimizer.as_ref().ok_or("no optimizer")?);
    let mut moment_diff = 0.0f64;
    for ((k1, t1), (k2, t2)) in o1.state_tensors(&m1.store).iter().zip(&o2.state_tensors(&m2.store)) {
        if k1 != k2 {
            return Err(format!("optimizer state keys differ: {k1} vs {k2}"));
        }
        moment_diff = moment_diff.max(max_diff(t1.data(), t2.data()));
    }
    let worst = grad_diff.max(param_diff).max(moment_diff);
    if !moved {
        return Err("the update left every parameter unchanged".into());
    }
    if worst > tol {
        return Err(format!(
            "max diff {worst:.3e} (gradient {grad_diff:.3e}, parameters {param_diff:.3e}, moments {moment_diff:.3e})"
        ));
    }
    Ok(format!("gradient {grad_diff:.1e}, moments {moment_diff:.1e}, parameters {param_diff:.1e}"))
}

/// Full-model loss with zero-initialised adapters against the same weights
/// without adapters; must be bit-identical.
pub fn lora_transparency(seed: u64) -> Check {
    let with = PipelineModel::new(&ModelConfig::default(), seed).map_err(err)?;
    let cfg = ModelConfig {
        disable_lora: true,
        ..ModelConfig::default()
    };
    let mut without = PipelineModel::new(&cfg, seed).map_err(err)?;
    let copied = without.store.copy_matching(&with.store);
    if copied != without.store.len() || with.store.count(Group::Lora) == 0 {
        return Err(format!("copied {copied} of {} tensors", without.store.len()));
    }
    let spec = SynthSpec::default();
    let batch: Vec<Sample> = ["ni3hao", "ma1ma"]
        .iter()
        .enumerate()
        .map(|(i, t)| synth_utterance(&spec, t, i as u64))
        .collect::<Result<_>>()
        .map_err(err)?;
    let (l1, l2) = (forward_loss(&with, &batch).map_err(err)?, forward_loss(&without, &batch).map_err(err)?);
    if l1.to_bits() != l2.to_bits() {
        return Err(format!("loss {l1:?} with adapters vs {l2:?} without"));
    }
    Ok(format!("loss {l1:.12} bit-identical with and without adapters"))
}
