use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    build_manifests, read_feature_dump, spec_for_split, write_feature_dump, DynamicBatcher, Manifest, Manifests,
    Split, Synthesizer,
};
use crate::error::{Error, Result};
use crate::eval::{emit_report, score_run, CerReport, Normalization, RunScores};
use crate::foundation::{default_cache_dir, load_pretrained};
use crate::nn::{Checkpoint, EncoderConfig, EncoderVariant, PipelineModel, ProjectorConfig, ProjectorKind};
use crate::pipeline::{decode_all, read_decodes, write_decodes, Sample};
use crate::train::{
    final_checkpoint, is_complete, resume, run_schedule, EpochRecord, StageSchedule, TrainData, TrainPlan,
    TrainState,
};

pub const PREPARED_FILE: &str = "prepared.toml";
pub const CONFIG_ECHO: &str = "config.toml";
pub const BUILD_FILE: &str = "build.txt";
pub const DECODE_DIR: &str = "decodes";
pub const COUNTS_FILE: &str = "counts.tsv";
pub const EXPERIMENT_FILE: &str = "experiment.toml";

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).is_ok_and(|mut it| it.next().is_some())
}

fn remove_if_present(path: &Path) -> Result<()> {
    let res = if path.is_dir() {
        fs::remove_dir_all(path)
    } else if path.exists() {
        fs::remove_file(path)
    } else {
        return Ok(());
    };
    res.map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Utterance counts of prepared splits.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSummary {
    pub dir: PathBuf,
    /// `(split, utterances, utterances per epoch after weighting)`
    pub splits: Vec<(Split, usize, u64)>,
}

impl fmt::Display for DataSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "prepared {}", self.dir.display())?;
        for (split, n, weighted) in &self.splits {
            writeln!(f, "  {split:<12} {n:>5} utterances ({weighted} per epoch)")?;
        }
        Ok(())
    }
}

/// Data settings a prepared directory was built with.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Prepared {
    synth: crate::data::SynthSpec,
    corpus: crate::data::CorpusSpec,
}

/// Writes the four manifests, optionally the feature store, and warms the
/// pretrained-weight cache. A non-empty directory is refused unless `force`.
pub fn prepare_data(cfg: &RunConfig, force: bool) -> Result<DataSummary> {
    let dir = &cfg.data.dir;
    if is_nonempty_dir(dir) {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        for sub in ["manifests", "features", PREPARED_FILE] {
            remove_if_present(&dir.join(sub))?;
        }
    }
    let manifests = build_manifests(&cfg.data.synth, &cfg.data.corpus)?;
    for split in Split::ALL {
        let m = manifests.get(split);
        let path = cfg.data.manifest_path(split);
        write_file(&path, &m.to_tsv())?;
        if cfg.data.dump_features {
            let fdir = cfg.data.feature_dir(split);
            fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
            let synth = Synthesizer::new(&spec_for_split(&cfg.data.synth, &cfg.data.corpus, split))?;
            for s in m.samples(&synth)? {
                write_feature_dump(&fdir.join(format!("{}.feat", s.utt_id)), &s.features)?;
            }
        }
    }
    let prepared = Prepared {
        synth: cfg.data.synth.clone(),
        corpus: cfg.data.corpus.clone(),
    };
    let text = toml::to_string(&prepared).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join(PREPARED_FILE), &text)?;
    build_model(cfg)?;
    Ok(DataSummary {
        dir: dir.clone(),
        splits: Split::ALL
            .iter()
            .map(|&s| (s, manifests.get(s).len(), manifests.get(s).total_weight()))
            .collect(),
    })
}

/// Loads the prepared manifests, checking they were built from this config's data settings.
pub fn load_manifests(cfg: &RunConfig) -> Result<Manifests> {
    let marker = cfg.data.dir.join(PREPARED_FILE);
    let text = fs::read_to_string(&marker).map_err(|_| {
        Error::Data(format!(
            "{} holds no prepared data; run prepare-data first",
            cfg.data.dir.display()
        ))
    })?;
    let prepared: Prepared = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", marker.display())))?;
    if prepared.synth != cfg.data.synth || prepared.corpus != cfg.data.corpus {
        return Err(Error::Config(format!(
            "{} was prepared with different data settings",
            cfg.data.dir.display()
        )));
    }
    let load = |s: Split| Manifest::load(&cfg.data.manifest_path(s));
    Ok(Manifests {
        train: load(Split::Train)?,
        test_clean: load(Split::TestClean)?,
        test_noisy: load(Split::TestNoisy)?,
        test_accent: load(Split::TestAccent)?,
    })
}

/// Samples of one split, read from the feature store when present, otherwise synthesized.
pub fn load_samples(cfg: &RunConfig, split: Split, manifest: &Manifest) -> Result<Vec<Sample>> {
    let synth = Synthesizer::new(&spec_for_split(&cfg.data.synth, &cfg.data.corpus, split))?;
    let fdir = cfg.data.feature_dir(split);
    if !fdir.is_dir() {
        return manifest.samples(&synth);
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(Sample {
                utt_id: e.utt_id.clone(),
                features: read_feature_dump(&fdir.join(format!("{}.feat", e.utt_id)))?,
                prompt: cfg.data.synth.prompt.clone(),
                transcript: e.transcript.clone(),
            })
        })
        .collect()
}

/// Fresh model with the pretrained encoder and LM body loaded. Weights are
/// cached in the data directory and in the shared cache.
pub fn build_model(cfg: &RunConfig) -> Result<PipelineModel> {
    let mut model = PipelineModel::new(&cfg.model, cfg.seed)?;
    let local = cfg.data.foundation_dir();
    let shared = default_cache_dir();
    load_pretrained(&mut model, &cfg.data.synth, &cfg.foundation, &[&local, &shared])?;
    Ok(model)
}

pub fn train_plan(cfg: &RunConfig) -> TrainPlan {
    TrainPlan::new(cfg.stages.clone(), cfg.optim.clone(), cfg.seed)
}

/// Optimizer updates a full run of `cfg` performs.
pub fn planned_updates(cfg: &RunConfig) -> Result<u64> {
    let manifests = load_manifests(cfg)?;
    let samples = load_samples(cfg, Split::Train, &manifests.train)?;
    let data = TrainData {
        manifest: &manifests.train,
        samples: &samples,
        spec: &cfg.data.synth,
        batcher: DynamicBatcher::new(cfg.data.batch_cap)?,
    };
    train_plan(cfg).planned_updates(&data)
}

fn build_id() -> String {
    let describe = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    format!(
        "alignlab {} ({})\n",
        env!("CARGO_PKG_VERSION"),
        describe.unwrap_or_else(|| "no git checkout".into())
    )
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Option<PathBuf>,
    pub epochs: Vec<EpochRecord>,
    pub updates: u64,
    /// Training continued from a checkpoint already in the run directory.
    pub resumed: bool,
}

impl TrainOutcome {
    pub fn complete(&self) -> bool {
        self.final_checkpoint.is_some()
    }
}

/// Trains `cfg` in `run_dir`, resuming from the newest checkpoint there.
/// `halt_after_epochs` stops early after that many epochs in total.
pub fn train(cfg: &RunConfig, run_dir: &Path, halt_after_epochs: Option<usize>) -> Result<TrainOutcome> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let echo = cfg.to_toml()?;
    let echo_path = run_dir.join(CONFIG_ECHO);
    match fs::read_to_string(&echo_path) {
        Ok(existing) if existing != echo => {
            return Err(Error::Config(format!(
                "{} belongs to a run with a different config",
                run_dir.display()
            )))
        }
        Ok(_) => {}
        Err(_) => write_file(&echo_path, &echo)?,
    }
    write_file(&run_dir.join(BUILD_FILE), &build_id())?;
    if is_complete(run_dir) {
        return Ok(TrainOutcome {
            final_checkpoint: Some(final_checkpoint(run_dir)?),
            epochs: Vec::new(),
            updates: 0,
            resumed: true,
        });
    }
    let manifests = load_manifests(cfg)?;
    let samples = load_samples(cfg, Split::Train, &manifests.train)?;
    let data = TrainData {
        manifest: &manifests.train,
        samples: &samples,
        spec: &cfg.data.synth,
        batcher: DynamicBatcher::new(cfg.data.batch_cap)?,
    };
    let mut plan = train_plan(cfg).with_run_dir(run_dir);
    plan.halt_after_epochs = halt_after_epochs;
    let mut model = build_model(cfg)?;
    let restored = resume(&mut model, &plan, run_dir)?;
    let resumed = restored.is_some();
    let mut state = restored.unwrap_or_else(TrainState::new);
    run_schedule(&mut model, &data, &plan, &mut state)?;
    Ok(TrainOutcome {
        final_checkpoint: if is_complete(run_dir) {
            Some(final_checkpoint(run_dir)?)
        } else {
            None
        },
        updates: state.updates.len() as u64,
        epochs: state.epochs,
        resumed,
    })
}

/// Greedy-decodes every configured test set with the run's final checkpoint
/// into `decodes/<split>.tsv`.
pub fn decode(cfg: &RunConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    if !is_complete(run_dir) {
        return Err(Error::Data(format!("{} holds no finished training run", run_dir.display())));
    }
    let model = Checkpoint::load(&final_checkpoint(run_dir)?)?.to_model()?;
    let manifests = load_manifests(cfg)?;
    let mut written = Vec::new();
    for &split in &cfg.eval.test_sets {
        let samples = load_samples(cfg, split, manifests.get(split))?;
        let rows = decode_all(&model, &samples, cfg.eval.max_decode_len)?;
        let path = run_dir.join(DECODE_DIR).join(format!("{split}.tsv"));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_decodes(&path, &rows)?;
        written.push(path);
    }
    Ok(written)
}

/// Scores the run's decodes of every configured test set and writes `counts.tsv`.
pub fn score(cfg: &RunConfig, run_dir: &Path, label: &str) -> Result<RunScores> {
    let manifests = load_manifests(cfg)?;
    let mut scores = RunScores {
        label: label.to_string(),
        sets: Default::default(),
    };
    for &split in &cfg.eval.test_sets {
        let path = run_dir.join(DECODE_DIR).join(format!("{split}.tsv"));
        let rows = read_decodes(&path)?;
        let s = score_run(&rows, manifests.get(split), &cfg.eval.normalization)
            .map_err(|e| Error::Scoring(format!("{}: {e}", path.display())))?;
        scores.sets.insert(split.to_string(), s.counts);
    }
    write_file(&run_dir.join(COUNTS_FILE), &scores.counts_tsv())?;
    Ok(scores)
}

/// Loads `counts.tsv` of a scored run.
pub fn load_scores(run_dir: &Path, label: &str) -> Result<RunScores> {
    let path = run_dir.join(COUNTS_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::Report(format!("{} has not been scored", run_dir.display())))?;
    RunScores::parse_counts_tsv(label, &text)
}

/// Report over scored runs; columns are labelled with each run directory's name.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path, title: &str, norm: &Normalization) -> Result<CerReport> {
    let runs = run_dirs
        .iter()
        .map(|d| {
            let label = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            load_scores(d, &label)
        })
        .collect::<Result<Vec<_>>>()?;
    emit_report(out_dir, title, &runs, norm)
}

/// Train, decode and score in one go.
pub fn run_pipeline(cfg: &RunConfig, run_dir: &Path, label: &str) -> Result<RunScores> {
    let out = train(cfg, run_dir, None)?;
    if !out.complete() {
        return Err(Error::Contract("training stopped before the schedule finished".into()));
    }
    decode(cfg, run_dir)?;
    score(cfg, run_dir, label)
}

/// The canned comparison experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ProjectorCompare,
    EncoderCompare,
    ScheduleCompare,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [
        Experiment::ProjectorCompare,
        Experiment::EncoderCompare,
        Experiment::ScheduleCompare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::ProjectorCompare => "projector-compare",
            Experiment::EncoderCompare => "encoder-compare",
            Experiment::ScheduleCompare => "schedule-compare",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Experiment::ProjectorCompare => "Projector comparison (ssl-analog encoder)",
            Experiment::EncoderCompare => "Encoder comparison (transformer projector)",
            Experiment::ScheduleCompare => "Staged vs all-unfrozen training at an equal step budget",
        }
    }

    /// Arms as `(label, config)`; all arms share data and foundation weights.
    pub fn arms(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c.resolve();
            c
        };
        match self {
            Experiment::ProjectorCompare => [ProjectorKind::Transformer, ProjectorKind::Qformer]
                .into_iter()
                .map(|k| {
                    let c = with(&|c| {
                        c.model.encoder = EncoderConfig::for_variant(EncoderVariant::SslAnalog);
                        c.model.projector = ProjectorConfig::for_kind(k);
                    });
                    (k.as_str().to_string(), c)
                })
                .collect(),
            Experiment::EncoderCompare => [EncoderVariant::SupervisedAnalog, EncoderVariant::SslAnalog]
                .into_iter()
                .map(|v| {
                    let c = with(&|c| {
                        c.model.encoder = EncoderConfig::for_variant(v);
                        c.model.projector = ProjectorConfig::for_kind(ProjectorKind::Transformer);
                    });
                    (v.as_str().to_string(), c)
                })
                .collect(),
            Experiment::ScheduleCompare => {
                let mut arms = Vec::new();
                for k in 0..SCHEDULE_SEEDS {
                    let seed = base.seed + k;
                    let staged = with(&|c| c.seed = seed);
                    let all = with(&|c| {
                        c.seed = seed;
                        c.stages = StageSchedule::all_unfrozen(base.stages.total_epochs());
                    });
                    arms.push((format!("staged-s{seed}"), staged));
                    arms.push((format!("all-s{seed}"), all));
                }
                arms
            }
        }
    }
}

/// Seeds per schedule-compare arm pair.
pub const SCHEDULE_SEEDS: u64 = 3;

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown experiment `{s}`; expected one of {:?}",
                Self::ALL.map(Experiment::as_str)
            ))
        })
    }
}

/// Clean-test outcome of one staged/all-unfrozen seed pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedPair {
    pub seed: u64,
    pub updates: u64,
    pub staged_cer: f64,
    pub all_cer: f64,
}

impl SeedPair {
    pub fn staged_wins(&self) -> bool {
        self.staged_cer < self.all_cer
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub experiment: Experiment,
    pub report: CerReport,
    pub runs: Vec<RunScores>,
    /// Filled for schedule-compare only.
    pub seed_pairs: Vec<SeedPair>,
    pub summary: String,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct ExperimentEcho {
    experiment: Experiment,
    base: RunConfig,
}

/// Runs every arm of `exp` sequentially under `root` and writes the
/// comparison report there. A non-empty `root` is refused unless it holds the
/// same experiment (which then resumes) or `force` is set.
pub fn run_experiment(exp: Experiment, base: &RunConfig, root: &Path, force: bool) -> Result<ExperimentOutcome> {
    let mut base = base.clone();
    base.data.dir = root.join("data");
    base.resolve();
    base.validate()?;
    let echo = toml::to_string(&ExperimentEcho {
        experiment: exp,
        base: base.clone(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    let echo_path = root.join(EXPERIMENT_FILE);
    let same = fs::read_to_string(&echo_path).is_ok_and(|t| t == echo);
    let arms = exp.arms(&base);
    if is_nonempty_dir(root) && !same {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to start over",
                root.display()
            )));
        }
        for (label, _) in &arms {
            remove_if_present(&root.join(label))?;
        }
        for f in ["data", "report.md", "report.tsv", EXPERIMENT_FILE] {
            remove_if_present(&root.join(f))?;
        }
    }
    write_file(&echo_path, &echo)?;
    if !root.join("data").join(PREPARED_FILE).is_file() {
        log::info!("{exp}: preparing data");
        prepare_data(&base, true)?;
    }
    let mut runs = Vec::new();
    let mut budgets = Vec::new();
    for (label, cfg) in &arms {
        log::info!("{exp}: arm {label}");
        budgets.push(planned_updates(cfg)?);
        runs.push(run_pipeline(cfg, &root.join(label), label)?);
    }
    let mut seed_pairs = Vec::new();
    let mut summary = String::new();
    if exp == Experiment::ScheduleCompare {
        let clean = Split::TestClean.to_string();
        for k in 0..arms.len() / 2 {
            let (s, a) = (2 * k, 2 * k + 1);
            if budgets[s] != budgets[a] {
                return Err(Error::Config(format!(
                    "arms {} and {} differ in step budget ({} vs {})",
                    arms[s].0, arms[a].0, budgets[s], budgets[a]
                )));
            }
            let cer = |i: usize| runs[i].sets.get(&clean).map_or(Ok(f64::NAN), |c| c.cer().map(|v| 100.0 * v));
            seed_pairs.push(SeedPair {
                seed: arms[s].1.seed,
                updates: budgets[s],
                staged_cer: cer(s)?,
                all_cer: cer(a)?,
            });
        }
        summary.push_str("\n| seed | updates | staged clean CER% | all-unfrozen clean CER% | lower |\n|---:|---:|---:|---:|---|\n");
        for p in &seed_pairs {
            summary.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {} |\n",
                p.seed,
                p.updates,
                p.staged_cer,
                p.all_cer,
                if p.staged_wins() { "staged" } else { "all-unfrozen" }
            ));
        }
        let wins = seed_pairs.iter().filter(|p| p.staged_wins()).count();
        summary.push_str(&format!(
            "\nStaged training has the lower clean-test CER in {wins} of {} seeds.\n",
            seed_pairs.len()
        ));
    } else {
        summary.push_str(&format!(
            "\nAll arms use seed {} and {} optimizer updates.\n",
            base.seed,
            budgets.first().copied().unwrap_or(0)
        ));
    }
    let report = emit_report(root, exp.title(), &runs, &base.eval.normalization)?;
    let md = root.join("report.md");
    let mut text = fs::read_to_string(&md).map_err(|e| Error::io(&md, e))?;
    text.push_str(&summary);
    write_file(&md, &text)?;
    Ok(ExperimentOutcome {
        experiment: exp,
        report,
        runs,
        seed_pairs,
        summary,
    })
}
