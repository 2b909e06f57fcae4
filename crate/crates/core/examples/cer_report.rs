// Character error rate with minimal alignments, micro-averaging and the
// test-set × system report table.

use alignlab::data::{Manifest, ManifestEntry, Split};
use alignlab::eval::{cer, score_run, CerReport, Normalization, RunScores};

fn manifest(rows: &[(&str, &str)]) -> alignlab::Result<Manifest> {
    Manifest::new(
        rows.iter()
            .map(|(id, t)| ManifestEntry {
                utt_id: id.to_string(),
                transcript: t.to_string(),
                seed: 0,
                weight: 1,
                split: Split::TestClean,
            })
            .collect(),
    )
}

pub fn run_example() -> alignlab::Result<()> {
    for (r, h) in [("abc", "abc"), ("abc", "axc"), ("kitten", "sitting"), ("Hello, world", "helloworld")] {
        let (c, v) = cer(r, h)?;
        println!(
            "{r:>14} | {h:<10} S={} I={} D={} CER={:.3}",
            c.substitutions, c.insertions, c.deletions, v
        );
    }

    let norm = Normalization::default();
    let m = manifest(&[("u1", "a"), ("u2", "abc")])?;
    let decodes = vec![("u1".to_string(), "a".to_string()), ("u2".to_string(), String::new())];
    let set = score_run(&decodes, &m, &norm)?;
    println!("micro-averaged CER over (0 of 1, 3 of 3) errors: {}", set.cer()?);

    let run = |label: &str, clean: usize, noisy: usize| RunScores {
        label: label.into(),
        sets: [("test_clean", clean), ("test_noisy", noisy)]
            .into_iter()
            .map(|(s, e)| {
                (
                    s.to_string(),
                    alignlab::eval::AlignmentCounts {
                        substitutions: e,
                        ref_len: 300,
                        ..Default::default()
                    },
                )
            })
            .collect(),
    };
    let report = CerReport::from_runs("Projector comparison", &[run("transformer", 9, 21), run("qformer", 12, 18)])?;
    print!("{}", report.to_markdown(&norm));
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
