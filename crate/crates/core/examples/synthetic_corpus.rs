// Synthetic corpus: disjoint train/test manifests, per-split acoustic
// conditions, and dynamic batching by padded sample points.

use alignlab::data::{
    build_manifests, padded_cost, sample_points, spec_for_split, CorpusSpec, DynamicBatcher, Split, SynthSpec,
    Synthesizer,
};

pub fn run_example() -> alignlab::Result<()> {
    let spec = SynthSpec::default();
    let corpus = CorpusSpec::default();
    let manifests = build_manifests(&spec, &corpus)?;
    for split in Split::ALL {
        let m = manifests.get(split);
        println!("{split:<12} {:>4} utterances, {:>4} per epoch", m.len(), m.total_weight());
    }

    let first = &manifests.test_clean.entries[0];
    for split in Split::TESTS {
        let synth = Synthesizer::new(&spec_for_split(&spec, &corpus, split))?;
        let f = synth.features(&first.transcript, first.seed)?;
        let energy: f64 = f.data().iter().map(|v| v * v).sum::<f64>() / f.numel() as f64;
        println!("{split:<12} {:?}: {} frames, mean energy {energy:.3}", first.transcript, f.rows());
    }

    let batcher = DynamicBatcher::default();
    let batches = batcher.pack_batches(&manifests.train, &spec, 42)?;
    let lens: Vec<usize> = manifests
        .train
        .entries
        .iter()
        .map(|e| sample_points(&spec, &e.transcript))
        .collect();
    let costs: Vec<usize> = batches
        .iter()
        .map(|b| padded_cost(b.iter().map(|&i| lens[i])))
        .collect();
    println!(
        "{} batches under cap {}: sizes {}..={} utterances, padded cost at most {}",
        batches.len(),
        batcher.cap,
        batches.iter().map(Vec::len).min().unwrap_or(0),
        batches.iter().map(Vec::len).max().unwrap_or(0),
        costs.iter().max().unwrap_or(&0)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
