//! Deterministic stand-ins for the pretrained encoder and LM.
//!
//! The LM learns to copy a string presented as noisy token embeddings in the
//! speech region. The supervised-analog encoder learns frame-level character
//! classification on noise- and warp-augmented speech; the ssl-analog encoder
//! learns to reconstruct masked clean speech. Results are cached per
//! configuration, in memory and optionally on disk.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tensor, Var};
use crate::data::{accent_warp, apply_warp, Perturbation, SynthSpec, Synthesizer};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, EncoderVariant, Gradients, Group, Linear, ModelConfig, ParamStore, PipelineModel, Session, TextRole};
use crate::parallel;
use crate::pipeline::{regulate, regulated_loss};
use crate::train::{lr_at, AdamW, OptimSettings};

/// Pretraining budgets. The foundation seed is independent of the run seed,
/// so every experiment arm starts from the same pretrained weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoundationConfig {
    pub seed: u64,
    pub lm_steps: usize,
    pub encoder_steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Noise added to token embeddings shown in the speech region.
    pub embedding_noise: f64,
    /// Upper noise level of the supervised-analog augmentation, as a multiple of the synthesis noise.
    pub augment_noise_mult: f64,
    /// Largest warp strength of the supervised-analog augmentation.
    pub augment_warp: f64,
    /// Fraction of frames zeroed for ssl-analog reconstruction.
    pub mask_fraction: f64,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            lm_steps: 800,
            encoder_steps: 300,
            batch_size: 8,
            lr_peak: 1e-2,
            warmup_steps: 40,
            min_len: 2,
            max_len: 12,
            embedding_noise: 0.2,
            augment_noise_mult: 3.0,
            augment_warp: 0.8,
            mask_fraction: 0.25,
        }
    }
}

impl FoundationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("foundation batch_size and string lengths must be positive and ordered".into()));
        }
        if !(self.lr_peak > 0.0 && self.embedding_noise >= 0.0 && (0.0..1.0).contains(&self.mask_fraction)) {
            return Err(Error::Config("foundation lr_peak, embedding_noise or mask_fraction out of range".into()));
        }
        Ok(())
    }

    fn settings(&self) -> OptimSettings {
        OptimSettings {
            lr_peak: self.lr_peak,
            warmup_steps: self.warmup_steps.max(1),
            accum_steps: 1,
            ..OptimSettings::default()
        }
    }
}

/// Loss and gradients summed over `items`; each item returns its loss and weight.
fn batch_grads<T: Sync>(
    store: &ParamStore,
    items: &[T],
    f: impl for<'p> Fn(&mut Session<'p>, &T) -> Result<(Var, f64)> + Sync,
) -> Result<(f64, Gradients)> {
    let outs: Vec<Result<(f64, Gradients)>> = parallel::pool().install(|| {
        items
            .par_iter()
            .map(|it| {
                let mut s = Session::new(store);
                let (loss, w) = f(&mut s, it)?;
                let value = s.g.scalar_value(loss);
                let scaled = s.g.scale(loss, w)?;
                s.g.backward(scaled)?;
                Ok((value * w, s.gradients()))
            })
            .collect()
    });
    let mut total = Gradients::new(store.len());
    let mut loss = 0.0;
    for o in outs {
        let (l, g) = o?;
        loss += l;
        total.add(&g);
    }
    Ok((loss, total))
}

fn random_string(rng: &mut ChaCha8Rng, chars: &[char], cfg: &FoundationConfig) -> String {
    let n = rng.random_range(cfg.min_len..=cfg.max_len);
    (0..n).map(|_| chars[rng.random_range(0..chars.len())]).collect()
}

fn noise(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    match Normal::new(0.0, std) {
        Ok(d) if std > 0.0 => (0..n).map(|_| d.sample(rng)).collect(),
        _ => vec![0.0; n],
    }
}

struct CopyItem {
    ids: Vec<usize>,
    noise: Tensor,
    weight: f64,
}

fn copy_batch(model: &PipelineModel, rng: &mut ChaCha8Rng, chars: &[char], cfg: &FoundationConfig) -> Result<Vec<CopyItem>> {
    let d = model.config.lm.embed_dim;
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let text = random_string(rng, chars, cfg);
        let ids = model.lm.vocab().encode(&text)?;
        let n = Tensor::new(vec![ids.len(), d], noise(rng, ids.len() * d, cfg.embedding_noise))?;
        items.push(CopyItem { ids, noise: n, weight: 0.0 });
    }
    let total: usize = items.iter().map(|it| it.ids.len() + 1).sum();
    items.iter_mut().for_each(|it| it.weight = (it.ids.len() + 1) as f64 / total as f64);
    Ok(items)
}

fn copy_loss(model: &PipelineModel, s: &mut Session<'_>, it: &CopyItem, prompt: &str) -> Result<(Var, usize)> {
    let e = model.lm.embed_ids(s, &it.ids)?;
    let n = s.g.input(it.noise.clone());
    let speech = s.g.add(e, n)?;
    let (_, e_p) = model.lm.tokenize_embed(s, prompt, TextRole::Prompt)?;
    let reg = regulate(model, s, speech, e_p, &it.ids)?;
    regulated_loss(model, s, &reg)
}

fn optimize(
    model: &mut PipelineModel,
    group: Group,
    cfg: &FoundationConfig,
    steps: usize,
    mut step_fn: impl FnMut(&PipelineModel, usize) -> Result<(f64, Gradients)>,
) -> Result<Vec<f64>> {
    let settings = cfg.settings();
    let mut opt = AdamW::new(&model.store, model.store.ids_in(group), &settings);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, mut grads) = step_fn(model, step)?;
        crate::train::clip_gradients(&mut grads, settings.clip_value);
        let lr = lr_at(&settings, step as u64 + 1)?;
        opt.step(&mut model.store, &grads, lr)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Copy-task pretraining of the LM body; returns the trained model and per-step losses.
pub fn pretrain_lm(config: &ModelConfig, spec: &SynthSpec, cfg: &FoundationConfig) -> Result<(PipelineModel, Vec<f64>)> {
    cfg.validate()?;
    let mut model = PipelineModel::new(config, cfg.seed)?;
    model.store.unfreeze_all();
    let chars: Vec<char> = spec.alphabet.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11a7_0c09);
    let prompt = spec.prompt.clone();
    let losses = optimize(&mut model, Group::LmBody, cfg, cfg.lm_steps, |m, _| {
        let items = copy_batch(m, &mut rng, &chars, cfg)?;
        batch_grads(&m.store, &items, |s, it| {
            let (loss, _) = copy_loss(m, s, it, &prompt)?;
            Ok((loss, it.weight))
        })
    })?;
    Ok((model, losses))
}

/// Teacher-forced next-token accuracy of the copy task on fresh strings.
pub fn copy_accuracy(model: &PipelineModel, spec: &SynthSpec, cfg: &FoundationConfig, n: usize, seed: u64) -> Result<f64> {
    let chars: Vec<char> = spec.alphabet.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0usize, 0usize);
    for _ in 0..n.div_ceil(cfg.batch_size) {
        for it in copy_batch(model, &mut rng, &chars, cfg)? {
            let mut s = Session::new(&model.store);
            let e = model.lm.embed_ids(&mut s, &it.ids)?;
            let nz = s.g.input(it.noise.clone());
            let speech = s.g.add(e, nz)?;
            let (_, e_p) = model.lm.tokenize_embed(&mut s, &spec.prompt, TextRole::Prompt)?;
            let reg = regulate(model, &mut s, speech, e_p, &it.ids)?;
            let logits = model.lm.forward(&mut s, reg.input, &reg.layout.regions)?;
            let v = s.g.shape(logits).1;
            let data = s.g.value(logits);
            for (row, (&t, &m)) in reg.targets.iter().zip(&reg.loss_mask).enumerate() {
                if m {
                    let r = &data[row * v..(row + 1) * v];
                    let best = (0..v).fold(0, |b, j| if r[j] > r[b] { j } else { b });
                    hit += usize::from(best == t);
                    total += 1;
                }
            }
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

struct EncItem {
    input: Tensor,
    classes: Vec<usize>,
    recon: Vec<f64>,
}

/// Frames stacked `factor` at a time, zero-padded: the reconstruction target.
fn stacked(features: &Tensor, factor: usize) -> Vec<f64> {
    let d = features.cols();
    let rows = features.rows().div_ceil(factor);
    let mut out = vec![0.0; rows * factor * d];
    out[..features.numel()].copy_from_slice(features.data());
    out
}

fn encoder_batch(
    synth: &Synthesizer,
    rng: &mut ChaCha8Rng,
    cfg: &FoundationConfig,
    variant: EncoderVariant,
    factor: usize,
) -> Result<Vec<EncItem>> {
    let spec = &synth.spec;
    let d = spec.d_feat;
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let text = random_string(rng, synth.alphabet(), cfg);
        let clean = synth.features(&text, 0)?;
        let n = clean.numel();
        let mut x = clean.data().to_vec();
        match variant {
            EncoderVariant::SupervisedAnalog => {
                let std = spec.noise_std * rng.random_range(1.0..=cfg.augment_noise_mult.max(1.0));
                x.iter_mut().zip(noise(rng, n, std)).for_each(|(a, b)| *a += b);
                if cfg.augment_warp > 0.0 && rng.random_bool(0.5) {
                    let strength = rng.random_range(0.0..cfg.augment_warp);
                    apply_warp(&mut x, d, &accent_warp(d, strength, rng.random()));
                }
            }
            EncoderVariant::SslAnalog => {
                x.iter_mut().zip(noise(rng, n, spec.noise_std)).for_each(|(a, b)| *a += b);
            }
        }
        let target = Tensor::new(clean.shape().to_vec(), x.clone())?;
        if variant == EncoderVariant::SslAnalog {
            for frame in x.chunks_mut(d) {
                if rng.random_bool(cfg.mask_fraction) {
                    frame.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let rows = clean.rows();
        let classes = (0..rows.div_ceil(factor))
            .map(|j| {
                let c = text.chars().nth((j * factor) / spec.frames_per_char).expect("frame within text");
                synth.alphabet().iter().position(|&a| a == c).expect("alphabet char")
            })
            .collect();
        items.push(EncItem {
            input: Tensor::new(vec![rows, d], x)?,
            classes,
            recon: stacked(&target, factor),
        });
    }
    Ok(items)
}

/// Pretrains the encoder named in `config`; returns the trained model and per-step losses.
pub fn pretrain_encoder(config: &ModelConfig, spec: &SynthSpec, cfg: &FoundationConfig) -> Result<(PipelineModel, Vec<f64>)> {
    cfg.validate()?;
    let clean_spec = spec.with_perturbation(Perturbation::None);
    let synth = Synthesizer::new(&SynthSpec {
        noise_std: 0.0,
        ..clean_spec
    })?;
    let mut model = PipelineModel::new(config, cfg.seed)?;
    let variant = model.config.encoder.variant;
    let factor = model.config.encoder.subsampling_factor;
    let dim = model.config.encoder.out_dim();
    let head = match variant {
        EncoderVariant::SupervisedAnalog => {
            Linear::new(&mut model.store, "pretrain_head", dim, synth.alphabet().len(), true, Group::Encoder)?
        }
        EncoderVariant::SslAnalog => Linear::new(&mut model.store, "pretrain_head", dim, factor * spec.d_feat, true, Group::Encoder)?,
    };
    model.store.unfreeze_all();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe4c0_de75);
    let losses = optimize(&mut model, Group::Encoder, cfg, cfg.encoder_steps, |m, _| {
        let items = encoder_batch(&synth, &mut rng, cfg, variant, factor)?;
        let w = 1.0 / items.len() as f64;
        batch_grads(&m.store, &items, |s, it| {
            let x = s.g.input(it.input.clone());
            let h = m.encoder.encode_var(s, x)?;
            let out = head.forward(s, h)?;
            let loss = match variant {
                EncoderVariant::SupervisedAnalog => {
                    let mask = vec![true; it.classes.len()];
                    s.g.cross_entropy_masked(out, &it.classes, &mask)?
                }
                EncoderVariant::SslAnalog => s.g.mse(out, &it.recon)?,
            };
            Ok((loss, w))
        })
    })?;
    Ok((model, losses))
}

fn fnv(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Cache key of one pretrained part: a hash of everything that determines it.
fn part_key(part: &str, config: &ModelConfig, spec: &SynthSpec, cfg: &FoundationConfig) -> Result<String> {
    let relevant = match part {
        "lm" => json!({ "lm": config.lm, "prompt": spec.prompt, "alphabet": spec.alphabet }),
        _ => json!({ "encoder": config.encoder, "spec": spec.with_perturbation(Perturbation::None) }),
    };
    let text = serde_json::to_string(&json!({ "part": part, "config": relevant, "foundation": cfg }))
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("{part}-{:016x}", fnv(&text)))
}

type Memo = Mutex<HashMap<String, Arc<ParamStore>>>;

fn memo() -> &'static Memo {
    static MEMO: OnceLock<Memo> = OnceLock::new();
    MEMO.get_or_init(Default::default)
}

fn load_or_train(
    part: &str,
    config: &ModelConfig,
    spec: &SynthSpec,
    cfg: &FoundationConfig,
    cache_dirs: &[&Path],
) -> Result<Arc<ParamStore>> {
    static LOADING: Mutex<()> = Mutex::new(());
    let _guard = LOADING.lock().unwrap_or_else(|e| e.into_inner());
    let key = part_key(part, config, spec, cfg)?;
    let paths: Vec<PathBuf> = cache_dirs.iter().map(|d| d.join(format!("{key}.ckpt"))).collect();
    let cached = memo().lock().expect("foundation memo").get(&key).cloned();
    let (store, meta) = match cached {
        Some(store) => (store, json!({ "part": part, "foundation": cfg })),
        None => match paths.iter().find(|p| p.is_file()) {
            Some(p) => {
                log::info!("loading pretrained {part} from {}", p.display());
                let ck = Checkpoint::load(p)?;
                (Arc::new(ck.to_model()?.store), ck.meta)
            }
            None => {
                log::info!("pretraining {part} ({key})");
                let (model, losses) = match part {
                    "lm" => pretrain_lm(config, spec, cfg)?,
                    _ => pretrain_encoder(config, spec, cfg)?,
                };
                let meta = json!({ "part": part, "foundation": cfg, "final_loss": losses.last() });
                (Arc::new(model.store), meta)
            }
        },
    };
    memo().lock().expect("foundation memo").insert(key, store.clone());
    for p in paths.iter().filter(|p| !p.is_file()) {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut model = PipelineModel::new(config, 0)?;
        model.store.copy_groups(&store, &Group::ALL);
        Checkpoint::from_model(&model, meta.clone()).save(p)?;
    }
    Ok(store)
}

pub const CACHE_ENV: &str = "ALIGNLAB_CACHE";

/// Shared cache for pretrained weights: `ALIGNLAB_CACHE`, else a directory
/// under the system temp dir.
pub fn default_cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("alignlab-cache"))
}

/// Overwrites the encoder and LM body of `model` with their pretrained values.
/// Weights come from the in-process memo, else the first cache dir holding
/// them, else fresh pretraining; every cache dir lacking them gets a copy.
pub fn load_pretrained(
    model: &mut PipelineModel,
    spec: &SynthSpec,
    cfg: &FoundationConfig,
    cache_dirs: &[&Path],
) -> Result<()> {
    let config = model.config.clone();
    let lm = load_or_train("lm", &config, spec, cfg, cache_dirs)?;
    let enc = load_or_train("encoder", &config, spec, cfg, cache_dirs)?;
    let n_lm = model.store.copy_groups(&lm, &[Group::LmBody]);
    let n_enc = model.store.copy_groups(&enc, &[Group::Encoder]);
    let expected = |g: Group| model.store.ids_in(g).len();
    if n_lm != expected(Group::LmBody) || n_enc != expected(Group::Encoder) {
        return Err(Error::Checkpoint("pretrained weights do not cover the model".into()));
    }
    Ok(())
}
