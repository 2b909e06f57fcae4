// The full pipeline on one utterance: encoder, projector, bridge, the
// speech/prompt/transcript concatenation and next-token loss, then greedy
// decoding. The model is untrained, so its loss sits near ln V.

use alignlab::data::{synth_utterance, SynthSpec};
use alignlab::nn::{ModelConfig, PipelineModel, Session};
use alignlab::pipeline::{forward_loss, greedy_decode, regulate_sample};

pub fn run_example() -> alignlab::Result<()> {
    let model = PipelineModel::new(&ModelConfig::default(), 5)?;
    for (group, ids) in model.groups() {
        let n: usize = ids.iter().map(|&id| model.store.tensor(id).numel()).sum();
        println!("{:<10} {n:>7} weights", group.as_str());
    }

    let spec = SynthSpec::default();
    let sample = synth_utterance(&spec, "ni3hao", 9)?;
    let mut s = Session::new(&model.store);
    let reg = regulate_sample(&model, &mut s, &sample)?;
    let l = &reg.layout;
    println!(
        "features {:?} -> speech rows {:?}, prompt rows {:?}, transcript rows {:?}",
        sample.features.shape(),
        l.speech,
        l.prompt,
        l.transcript
    );
    println!("scored positions: {}", reg.loss_mask.iter().filter(|&&m| m).count());

    let loss = forward_loss(&model, std::slice::from_ref(&sample))?;
    let ln_v = (model.lm.vocab().len() as f64).ln();
    println!("untrained loss {loss:.3} vs ln V = {ln_v:.3}");
    let hyp = greedy_decode(&model, &sample.features, &sample.prompt, 12)?;
    println!("untrained greedy decode: {hyp:?}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
