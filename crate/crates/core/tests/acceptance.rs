mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use alignlab::config::RunConfig;
use alignlab::data::Split;
use alignlab::eval::AlignmentCounts;
use alignlab::nn::{Gradients, LoraConfig, ParamId};
use alignlab::train::{clip_gradients, final_checkpoint, lr_at, OptimSettings};
use alignlab::workflow::{self, Experiment, ExperimentOutcome};
use common::Check;

const GRADIENT_BUDGET: Duration = Duration::from_secs(30);
const CLEAN_CER_MAX: f64 = 5.0;

fn gradient_suite() -> Check {
    let start = Instant::now();
    let results = common::gradient_suite().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = results.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    if let Some((name, r)) = results.iter().find(|(_, r)| !r.passes(common::FD_REL_TOL)) {
        return Err(format!("{name}: {r:?}"));
    }
    if elapsed > GRADIENT_BUDGET {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!("{} cases, worst rel. error {worst:.1e}, {elapsed:.2?}", results.len()))
}

fn formula_oracles() -> Check {
    let s = OptimSettings::default();
    let lr = |step| lr_at(&s, step).map_err(|e| e.to_string());
    if lr(2000)? != 5.0e-5 {
        return Err(format!("lr_at(2000) = {:e}", lr(2000)?));
    }
    for step in [1000, 8000] {
        if (lr(step)? - 2.5e-5).abs() > 1e-12 {
            return Err(format!("lr_at({step}) = {:e}", lr(step)?));
        }
    }
    let mut g = Gradients::default();
    g.set(ParamId::from_index(0), vec![7.2, -6.0, 3.1]);
    clip_gradients(&mut g, s.clip_value);
    let clipped = g.get(ParamId::from_index(0)).unwrap_or_default();
    if clipped != [5.0, -5.0, 3.1] {
        return Err(format!("clip gave {clipped:?}"));
    }
    let scaling = LoraConfig::default().scaling();
    if scaling != 4.0 {
        return Err(format!("LoRA scaling {scaling}"));
    }
    let transparency = common::lora_transparency(1)?;
    Ok(format!("lr 5e-5/2.5e-5/2.5e-5, clip ±5, LoRA scaling 4; {transparency}"))
}

fn convergence(out: &ExperimentOutcome) -> Check {
    let run = out
        .runs
        .iter()
        .find(|r| r.label == "staged-s1")
        .ok_or("no staged-s1 arm")?;
    let cer = |split: Split| -> Result<f64, String> {
        let c = run.sets.get(split.as_str()).ok_or(format!("no {split} score"))?;
        c.cer().map(|v| 100.0 * v).map_err(|e| e.to_string())
    };
    let (clean, noisy, accent) = (cer(Split::TestClean)?, cer(Split::TestNoisy)?, cer(Split::TestAccent)?);
    let detail = format!("clean {clean:.2}%, noisy {noisy:.2}%, accent {accent:.2}%");
    if clean <= CLEAN_CER_MAX && noisy > clean && accent > clean {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn schedule_comparison(out: &ExperimentOutcome, root: &Path) -> Check {
    let wins = out.seed_pairs.iter().filter(|p| p.staged_wins()).count();
    let detail = out
        .seed_pairs
        .iter()
        .map(|p| format!("seed {}: {:.2} vs {:.2}", p.seed, p.staged_cer, p.all_cer))
        .collect::<Vec<_>>()
        .join(", ");
    let md = fs::read_to_string(root.join("report.md")).map_err(|e| e.to_string())?;
    if !md.contains("Staged training has the lower clean-test CER") || out.seed_pairs.len() != 3 {
        return Err(format!("report lacks the seed table: {md}"));
    }
    if out.seed_pairs.iter().any(|p| p.updates != out.seed_pairs[0].updates) {
        return Err("seeds ran with different budgets".into());
    }
    let line = format!("staged wins {wins}/3 ({detail}; {} updates each)", out.seed_pairs[0].updates);
    if wins >= 2 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn cer_oracle() -> Check {
    common::cer_oracle(500)?;
    let a = AlignmentCounts {
        ref_len: 1,
        ..AlignmentCounts::default()
    };
    let b = AlignmentCounts {
        substitutions: 3,
        ref_len: 3,
        ..AlignmentCounts::default()
    };
    let (ca, cb) = (a.cer().map_err(|e| e.to_string())?, b.cer().map_err(|e| e.to_string())?);
    let micro = (a + b).cer().map_err(|e| e.to_string())?;
    if ca != 0.0 || cb != 1.0 || micro != 0.75 {
        return Err(format!("micro-average {micro} from {ca} and {cb}"));
    }
    Ok("500 pairs agree; micro-average 0.75".into())
}

fn determinism(base: &RunConfig, first: &Path, out: &ExperimentOutcome, scratch: &Path) -> Check {
    let e = |e: alignlab::Error| e.to_string();
    let second = scratch.join("rerun");
    let again = workflow::run_experiment(Experiment::ScheduleCompare, base, &second, false).map_err(e)?;
    if again.seed_pairs != out.seed_pairs {
        return Err("seed results differ on re-run".into());
    }
    let read = |p: &Path| fs::read(p).map_err(|err| format!("{}: {err}", p.display()));
    if read(&first.join("report.md"))? != read(&second.join("report.md"))? {
        return Err("report.md differs on re-run".into());
    }
    let arms = Experiment::ScheduleCompare.arms(base);
    let n_arms = arms.len();
    for (label, _) in &arms {
        let a = final_checkpoint(&first.join(label)).map_err(e)?;
        let b = final_checkpoint(&second.join(label)).map_err(e)?;
        if read(&a)? != read(&b)? {
            return Err(format!("{label}: final checkpoint differs on re-run"));
        }
    }
    let (label, mut cfg) = arms.into_iter().next().ok_or("no arms")?;
    cfg.data.dir = first.join("data");
    let resumed = scratch.join("resumed");
    let boundaries = [cfg.stages.stage[0].epochs, cfg.stages.stage[0].epochs + cfg.stages.stage[1].epochs];
    for halt in boundaries {
        let o = workflow::train(&cfg, &resumed, Some(halt)).map_err(e)?;
        if o.complete() {
            return Err(format!("run completed before the halt at epoch {halt}"));
        }
    }
    let o = workflow::train(&cfg, &resumed, None).map_err(e)?;
    let ck = o.final_checkpoint.ok_or("resumed run did not finish")?;
    if read(&ck)? != read(&final_checkpoint(&first.join(&label)).map_err(e)?)? {
        return Err("resumed final checkpoint differs".into());
    }
    Ok(format!(
        "re-run identical ({n_arms} checkpoints + report); resume at epochs {boundaries:?} identical"
    ))
}

fn batcher_properties() -> Check {
    common::batcher_properties(1000)?;
    Ok("1000 manifests".into())
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let base = RunConfig::toy();
    let root = tmp.path().join("schedule-compare");
    let experiment = workflow::run_experiment(Experiment::ScheduleCompare, &base, &root, false);
    let mut data_cfg = base.clone();
    data_cfg.data.dir = root.join("data");

    let with_experiment = |f: &dyn Fn(&ExperimentOutcome) -> Check| match &experiment {
        Ok(out) => f(out),
        Err(e) => Err(format!("schedule-compare failed: {e}")),
    };
    let results: Vec<(&str, Check)> = vec![
        ("gradient suite", guarded(gradient_suite)),
        ("hyperparameter formula oracles", guarded(formula_oracles)),
        ("freeze soundness", guarded(|| common::freeze_soundness(&data_cfg))),
        ("accumulation equivalence", guarded(|| common::accumulation_equivalence(&data_cfg, 1e-10))),
        ("end-to-end convergence", guarded(|| with_experiment(&convergence))),
        ("staged vs all-unfrozen", guarded(|| with_experiment(&|o| schedule_comparison(o, &root)))),
        ("CER oracle", guarded(cer_oracle)),
        (
            "determinism and resume",
            guarded(|| with_experiment(&|o| determinism(&base, &root, o, tmp.path()))),
        ),
        ("batcher properties", guarded(batcher_properties)),
    ];
    let mut failed = Vec::new();
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL criterion {}: {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
