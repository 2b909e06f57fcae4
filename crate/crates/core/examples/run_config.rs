// Run configs: the built-in toy recipe, partial TOML files falling back to
// the paper-scale defaults, and rejection of unknown keys.

use alignlab::config::RunConfig;

pub fn run_example() -> alignlab::Result<()> {
    let toy = RunConfig::toy();
    let text = toy.to_toml()?;
    println!("{}", text.lines().take(12).collect::<Vec<_>>().join("\n"));
    println!("...");

    let partial = RunConfig::parse("seed = 3\n[optim]\nlr_peak = 1e-3\n")?;
    println!(
        "partial file: seed {}, lr_peak {}, warmup_steps {} (paper-scale default), accum_steps {}",
        partial.seed, partial.optim.lr_peak, partial.optim.warmup_steps, partial.optim.accum_steps
    );

    match RunConfig::parse("[optim]\nlearning_rate = 1e-3\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("unknown keys are errors"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
