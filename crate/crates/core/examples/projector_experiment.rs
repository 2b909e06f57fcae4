// The projector comparison as a canned experiment: both arms share data,
// pretrained encoder and LM weights, seed and step budget.

use alignlab::config::RunConfig;
use alignlab::workflow::{run_experiment, Experiment};

pub fn run_example() -> alignlab::Result<()> {
    let tmp = tempfile::tempdir().map_err(|e| alignlab::Error::io(std::env::temp_dir(), e))?;
    let cfg = RunConfig::toy();
    let out = run_experiment(Experiment::ProjectorCompare, &cfg, tmp.path(), false)?;
    print!("{}", out.report.to_markdown(&cfg.eval.normalization));
    print!("{}", out.summary);
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
