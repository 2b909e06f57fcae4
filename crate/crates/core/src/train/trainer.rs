use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::optim::{clip_gradients, lr_at, AdamW, OptimSettings};
use crate::data::{derive_seed, DynamicBatcher, Manifest, SynthSpec};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Gradients, Group, PipelineModel};
use crate::pipeline::{loss_and_grads, Sample};

pub const LOG_FILE: &str = "train.log";
pub const FINAL_MARKER: &str = "FINAL";
const LOG_HEADER: &str = "step\tstage\tlr\tloss\tgrad_norm_preclip\twall_time";

/// One stage: the groups that train and for how many epochs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub groups: BTreeSet<Group>,
    pub epochs: usize,
}

impl StageSpec {
    pub fn new(groups: impl IntoIterator<Item = Group>, epochs: usize) -> Self {
        Self {
            groups: groups.into_iter().collect(),
            epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub stage: Vec<StageSpec>,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::staged()
    }
}

impl StageSchedule {
    pub const NAMES: [&'static str; 2] = ["staged", "all-unfrozen"];

    /// Projector and bridge for one epoch, then the encoder for two, then LoRA for two.
    pub fn staged() -> Self {
        Self {
            stage: vec![
                StageSpec::new([Group::Projector, Group::Bridge], 1),
                StageSpec::new([Group::Encoder], 2),
                StageSpec::new([Group::Lora], 2),
            ],
        }
    }

    /// Every group except the LM body, trained together.
    pub fn all_unfrozen(epochs: usize) -> Self {
        Self {
            stage: vec![StageSpec::new(
                [Group::Encoder, Group::Projector, Group::Bridge, Group::Lora],
                epochs,
            )],
        }
    }

    /// Named recipes; `all-unfrozen` keeps the epoch budget of `base`.
    pub fn by_name(name: &str, base: &StageSchedule) -> Result<Self> {
        match name {
            "staged" => Ok(Self::staged()),
            "all-unfrozen" => Ok(Self::all_unfrozen(base.total_epochs())),
            other => Err(Error::Config(format!(
                "unknown schedule `{other}`; expected one of {:?}",
                Self::NAMES
            ))),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage.iter().map(|s| s.epochs).sum()
    }

    /// Global epoch index of `(stage, epoch)`; shuffles depend on it, not on the stage.
    pub fn global_epoch(&self, stage: usize, epoch: usize) -> usize {
        self.stage[..stage].iter().map(|s| s.epochs).sum::<usize>() + epoch
    }

    pub fn validate(&self, model: &PipelineModel) -> Result<()> {
        if self.stage.is_empty() {
            return Err(Error::Config("the schedule needs at least one stage".into()));
        }
        for (i, st) in self.stage.iter().enumerate() {
            if st.groups.is_empty() || st.epochs == 0 {
                return Err(Error::Config(format!("stage {} needs groups and at least one epoch", i + 1)));
            }
            if st.groups.contains(&Group::LmBody) {
                return Err(Error::Config(format!("stage {} lists lm_body, which stays frozen", i + 1)));
            }
            if let Some(g) = st.groups.iter().find(|g| model.store.count(**g) == 0) {
                return Err(Error::Config(format!("stage {} names group `{g}`, absent from the model", i + 1)));
            }
        }
        Ok(())
    }
}

/// One optimizer update as written to the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRecord {
    pub step: u64,
    pub stage: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm_preclip: f64,
    pub wall_time: f64,
}

impl UpdateRecord {
    fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{:.6}\t{:.6}\t{:.3}",
            self.step, self.stage, self.lr, self.loss, self.grad_norm_preclip, self.wall_time
        )
    }
}

/// Token-weighted mean training loss of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub updates: u64,
}

/// Progress through a schedule. Stage and epoch are 0-based here; checkpoint
/// names are 1-based.
#[derive(Clone, Debug, Default)]
pub struct TrainState {
    pub global_step: u64,
    pub stage: usize,
    /// Completed epochs within `stage`.
    pub epoch: usize,
    /// Updates since the current stage began.
    pub stage_step: u64,
    pub optimizer: Option<AdamW>,
    pub updates: Vec<UpdateRecord>,
    pub epochs: Vec<EpochRecord>,
    accum: Gradients,
    micro: usize,
    micro_loss: f64,
}

impl TrainState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending_microbatches(&self) -> usize {
        self.micro
    }

    fn lr_step(&self, settings: &OptimSettings) -> u64 {
        if settings.restart_schedule_per_stage {
            self.stage_step + 1
        } else {
            self.global_step + 1
        }
    }

    /// Adds one microbatch. On every `accum_steps`-th call the summed gradient
    /// is divided by `accum_steps`, clipped and applied. Returns whether an
    /// update happened.
    pub fn accumulate_step(
        &mut self,
        model: &mut PipelineModel,
        settings: &OptimSettings,
        grads: &Gradients,
        loss: f64,
        clock: &Instant,
    ) -> Result<bool> {
        self.accum.add(grads);
        self.micro += 1;
        self.micro_loss += loss;
        if self.micro < settings.accum_steps {
            return Ok(false);
        }
        self.apply(model, settings, clock)?;
        Ok(true)
    }

    /// Applies any partially accumulated gradient, averaged over the
    /// microbatches actually seen.
    pub fn flush(&mut self, model: &mut PipelineModel, settings: &OptimSettings, clock: &Instant) -> Result<bool> {
        if self.micro == 0 {
            return Ok(false);
        }
        self.apply(model, settings, clock)?;
        Ok(true)
    }

    fn apply(&mut self, model: &mut PipelineModel, settings: &OptimSettings, clock: &Instant) -> Result<()> {
        let n = self.micro as f64;
        let mut grads = std::mem::take(&mut self.accum);
        grads.scale(1.0 / n);
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::Numeric { op: "gradient" });
        }
        clip_gradients(&mut grads, settings.clip_value);
        let lr = lr_at(settings, self.lr_step(settings))?;
        let opt = self
            .optimizer
            .get_or_insert_with(|| AdamW::new(&model.store, model.store.trainable_ids(), settings));
        opt.step(&mut model.store, &grads, lr)?;
        self.global_step += 1;
        self.stage_step += 1;
        self.updates.push(UpdateRecord {
            step: self.global_step,
            stage: self.stage + 1,
            lr,
            loss: self.micro_loss / n,
            grad_norm_preclip: norm,
            wall_time: clock.elapsed().as_secs_f64(),
        });
        self.micro = 0;
        self.micro_loss = 0.0;
        Ok(())
    }
}

/// Training data: manifest entries and their synthesized samples, in the same order.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub manifest: &'a Manifest,
    pub samples: &'a [Sample],
    pub spec: &'a SynthSpec,
    pub batcher: DynamicBatcher,
}

impl TrainData<'_> {
    fn validate(&self) -> Result<()> {
        if self.manifest.is_empty() {
            return Err(Error::Config("the training manifest is empty".into()));
        }
        if self.manifest.len() != self.samples.len() {
            return Err(Error::Contract("samples must match manifest entries one to one".into()));
        }
        Ok(())
    }
}

/// Everything fixed for the length of a training run.
#[derive(Clone, Debug)]
pub struct TrainPlan {
    pub schedule: StageSchedule,
    pub settings: OptimSettings,
    /// Base seed of the per-epoch shuffles.
    pub seed: u64,
    /// Directory for checkpoints and the log; nothing is written when `None`.
    pub run_dir: Option<PathBuf>,
    /// Stop after this many global epochs (simulates an interruption).
    pub halt_after_epochs: Option<usize>,
}

impl TrainPlan {
    pub fn new(schedule: StageSchedule, settings: OptimSettings, seed: u64) -> Self {
        Self {
            schedule,
            settings,
            seed,
            run_dir: None,
            halt_after_epochs: None,
        }
    }

    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    pub fn epoch_seed(&self, global_epoch: usize) -> u64 {
        derive_seed(self.seed, 0x0e90_c400 + global_epoch as u64)
    }

    /// Batches per global epoch, in order; identical for any schedule with the same seed.
    pub fn batches(&self, data: &TrainData<'_>, global_epoch: usize) -> Result<Vec<Vec<usize>>> {
        data.batcher
            .pack_batches(data.manifest, data.spec, self.epoch_seed(global_epoch))
    }

    /// Optimizer updates the whole schedule will perform on `data`.
    pub fn planned_updates(&self, data: &TrainData<'_>) -> Result<u64> {
        let mut total = 0u64;
        for g in 0..self.schedule.total_epochs() {
            let n = self.batches(data, g)?.len();
            total += n.div_ceil(self.settings.accum_steps) as u64;
        }
        Ok(total)
    }
}

pub fn checkpoint_name(stage: usize, epoch: usize) -> String {
    format!("ckpt-stage{stage}-epoch{epoch}")
}

fn parse_checkpoint_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("ckpt-stage")?;
    let (s, e) = rest.split_once("-epoch")?;
    Some((s.parse().ok()?, e.parse().ok()?))
}

/// Checkpoints in a run directory as `(stage, epoch, path)`, 1-based, in training order.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(usize, usize, PathBuf)>> {
    let mut out = Vec::new();
    let rd = match fs::read_dir(run_dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(run_dir, e)),
    };
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        if let Some((s, e)) = entry.file_name().to_str().and_then(parse_checkpoint_name) {
            out.push((s, e, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn save_checkpoint(model: &PipelineModel, state: &TrainState, plan: &TrainPlan, dir: &Path) -> Result<PathBuf> {
    let (stage, epoch) = (state.stage + 1, state.epoch);
    let meta = json!({
        "stage": stage,
        "epoch": epoch,
        "global_step": state.global_step,
        "stage_step": state.stage_step,
        "optimizer_steps": state.optimizer.as_ref().map_or(0, AdamW::steps),
        "schedule": plan.schedule,
        "optim": plan.settings,
        "train_seed": plan.seed,
    });
    let mut ck = Checkpoint::from_model(model, meta);
    if let Some(opt) = &state.optimizer {
        ck.tensors.extend(opt.state_tensors(&model.store));
    }
    let path = dir.join(checkpoint_name(stage, epoch));
    ck.save(&path)?;
    Ok(path)
}

/// Restores the latest checkpoint in `run_dir` into `model`; `None` when the
/// directory holds no checkpoint.
pub fn resume(model: &mut PipelineModel, plan: &TrainPlan, run_dir: &Path) -> Result<Option<TrainState>> {
    let Some((stage, epoch, path)) = list_checkpoints(run_dir)?.pop() else {
        return Ok(None);
    };
    let ck = Checkpoint::load(&path)?;
    if ck.model != model.config {
        return Err(Error::Checkpoint(format!(
            "{} was written for a different model configuration",
            path.display()
        )));
    }
    ck.restore_into(model)?;
    let meta_u64 = |k: &str| {
        ck.meta
            .get(k)
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}`", path.display())))
    };
    let mut state = TrainState {
        global_step: meta_u64("global_step")?,
        stage: stage - 1,
        epoch,
        stage_step: meta_u64("stage_step")?,
        ..TrainState::default()
    };
    let st = plan
        .schedule
        .stage
        .get(stage - 1)
        .ok_or_else(|| Error::Checkpoint(format!("{} is beyond the schedule", path.display())))?;
    if epoch >= st.epochs {
        state.stage += 1;
        state.epoch = 0;
        state.stage_step = 0;
    } else {
        model.store.set_trainable(&st.groups)?;
        let mut opt = AdamW::new(&model.store, model.store.trainable_ids(), &plan.settings);
        opt.load_state(&model.store, |k| ck.tensors.get(k).cloned(), meta_u64("optimizer_steps")?)?;
        state.optimizer = Some(opt);
    }
    Ok(Some(state))
}

struct Logger {
    file: Option<File>,
}

impl Logger {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { file: None });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file: Some(file) })
    }

    fn write(&mut self, rec: &UpdateRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", rec.tsv()).map_err(|e| Error::io(LOG_FILE, e))?;
        }
        Ok(())
    }
}

/// Runs one epoch of the current stage; returns the epoch's mean loss.
fn run_epoch(
    model: &mut PipelineModel,
    data: &TrainData<'_>,
    plan: &TrainPlan,
    state: &mut TrainState,
    logger: &mut Logger,
    clock: &Instant,
) -> Result<EpochRecord> {
    let global = plan.schedule.global_epoch(state.stage, state.epoch);
    let batches = plan.batches(data, global)?;
    let before = state.updates.len();
    let (mut loss_sum, mut tokens) = (0.0, 0usize);
    for idx in batches {
        let batch: Vec<Sample> = idx.iter().map(|&i| data.samples[i].clone()).collect();
        let out = loss_and_grads(model, &batch)?;
        loss_sum += out.loss * out.tokens as f64;
        tokens += out.tokens;
        state.accumulate_step(model, &plan.settings, &out.grads, out.loss, clock)?;
    }
    state.flush(model, &plan.settings, clock)?;
    for rec in &state.updates[before..] {
        logger.write(rec)?;
    }
    Ok(EpochRecord {
        stage: state.stage + 1,
        epoch: state.epoch + 1,
        mean_loss: loss_sum / tokens.max(1) as f64,
        updates: (state.updates.len() - before) as u64,
    })
}

/// Runs the remaining epochs of the current stage. Moments start fresh when
/// the stage starts from its first epoch.
pub fn run_stage(
    model: &mut PipelineModel,
    data: &TrainData<'_>,
    plan: &TrainPlan,
    state: &mut TrainState,
) -> Result<()> {
    data.validate()?;
    plan.schedule.validate(model)?;
    let st = plan
        .schedule
        .stage
        .get(state.stage)
        .ok_or_else(|| Error::Contract(format!("stage index {} out of range", state.stage)))?
        .clone();
    model.store.set_trainable(&st.groups)?;
    if state.epoch == 0 || state.optimizer.is_none() {
        state.optimizer = Some(AdamW::new(&model.store, model.store.trainable_ids(), &plan.settings));
        if state.epoch == 0 {
            state.stage_step = 0;
        }
    }
    let mut logger = Logger::open(plan.run_dir.as_deref())?;
    let clock = Instant::now();
    while state.epoch < st.epochs {
        let global = plan.schedule.global_epoch(state.stage, state.epoch);
        if plan.halt_after_epochs.is_some_and(|h| global >= h) {
            return Ok(());
        }
        let rec = run_epoch(model, data, plan, state, &mut logger, &clock)?;
        log::info!(
            "stage {} epoch {}: mean loss {:.4} over {} updates",
            rec.stage,
            rec.epoch,
            rec.mean_loss,
            rec.updates
        );
        state.epochs.push(rec);
        state.epoch += 1;
        if let Some(dir) = &plan.run_dir {
            save_checkpoint(model, state, plan, dir)?;
        }
    }
    Ok(())
}

/// Runs every remaining stage of the plan from `state`, then writes the final marker.
pub fn run_schedule(
    model: &mut PipelineModel,
    data: &TrainData<'_>,
    plan: &TrainPlan,
    state: &mut TrainState,
) -> Result<()> {
    plan.settings.validate()?;
    while state.stage < plan.schedule.stage.len() {
        run_stage(model, data, plan, state)?;
        if state.epoch < plan.schedule.stage[state.stage].epochs {
            return Ok(());
        }
        state.stage += 1;
        state.epoch = 0;
        state.optimizer = None;
    }
    if let Some(dir) = &plan.run_dir {
        let last = checkpoint_name(plan.schedule.stage.len(), plan.schedule.stage.last().map_or(0, |s| s.epochs));
        fs::write(dir.join(FINAL_MARKER), format!("{last}\n")).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// `run_schedule` from scratch with a single stage unfreezing every trainable group.
pub fn run_all_unfrozen(
    model: &mut PipelineModel,
    data: &TrainData<'_>,
    settings: &OptimSettings,
    seed: u64,
    epochs: usize,
) -> Result<TrainState> {
    let plan = TrainPlan::new(StageSchedule::all_unfrozen(epochs), settings.clone(), seed);
    let mut state = TrainState::new();
    run_schedule(model, data, &plan, &mut state)?;
    Ok(state)
}

/// Whether a run directory holds a completed training run.
pub fn is_complete(run_dir: &Path) -> bool {
    run_dir.join(FINAL_MARKER).is_file()
}

/// Path of the final checkpoint named by the marker.
pub fn final_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let marker = run_dir.join(FINAL_MARKER);
    let name = fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(run_dir.join(name.trim()))
}
