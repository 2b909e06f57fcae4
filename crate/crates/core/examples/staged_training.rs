// End to end on the toy corpus: prepare data, train projector → encoder →
// LoRA with the others frozen, decode the three test sets and score them.

use alignlab::config::RunConfig;
use alignlab::workflow;

pub fn run_example() -> alignlab::Result<()> {
    let tmp = tempfile::tempdir().map_err(|e| alignlab::Error::io(std::env::temp_dir(), e))?;
    let mut cfg = RunConfig::toy();
    cfg.data.dir = tmp.path().join("data");
    print!("{}", workflow::prepare_data(&cfg, false)?);

    let run_dir = tmp.path().join("staged");
    let out = workflow::train(&cfg, &run_dir, None)?;
    for e in &out.epochs {
        println!("stage {} epoch {}: loss {:.4} over {} updates", e.stage, e.epoch, e.mean_loss, e.updates);
    }
    workflow::decode(&cfg, &run_dir)?;
    let scores = workflow::score(&cfg, &run_dir, "staged")?;
    for (set, counts) in &scores.sets {
        println!("{set:<12} CER {:.2}%", 100.0 * counts.cer()?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
