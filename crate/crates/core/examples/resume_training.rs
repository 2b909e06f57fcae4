// Checkpoints after every epoch let an interrupted run resume at a stage
// boundary and finish bit-identical to an uninterrupted one.

use std::fs;

use alignlab::config::RunConfig;
use alignlab::train::final_checkpoint;
use alignlab::workflow;

pub fn run_example() -> alignlab::Result<()> {
    let tmp = tempfile::tempdir().map_err(|e| alignlab::Error::io(std::env::temp_dir(), e))?;
    let mut cfg = RunConfig::toy();
    cfg.data.dir = tmp.path().join("data");
    cfg.data.corpus.train_single = 30;
    cfg.data.corpus.train_replicated = 10;
    cfg.data.corpus.test_size = 10;
    workflow::prepare_data(&cfg, false)?;

    let straight = tmp.path().join("straight");
    workflow::train(&cfg, &straight, None)?;

    let resumed = tmp.path().join("resumed");
    let first = workflow::train(&cfg, &resumed, Some(3))?;
    println!("interrupted after {} epochs, complete: {}", first.epochs.len(), first.complete());
    let rest = workflow::train(&cfg, &resumed, None)?;
    println!("resumed: {}, ran {} more epochs", rest.resumed, rest.epochs.len());

    let read = |dir: &std::path::Path| -> alignlab::Result<Vec<u8>> {
        let p = final_checkpoint(dir)?;
        fs::read(&p).map_err(|e| alignlab::Error::io(p, e))
    };
    let same = read(&straight)? == read(&resumed)?;
    println!("final checkpoints byte-identical: {same}");
    assert!(same);
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
