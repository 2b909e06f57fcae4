// Reverse-mode gradients of a small attention head checked against central
// finite differences.

use alignlab::autodiff::{causal_mask, check_gradients, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> alignlab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let wq = Tensor::randn(&[6, 6], 0.5, &mut rng);
    let wk = Tensor::randn(&[6, 6], 0.5, &mut rng);
    let gamma = Tensor::filled(&[6], 1.2);
    let beta = Tensor::zeros(&[6]);

    let report = check_gradients(
        &[x, wq, wk, gamma, beta],
        |g, v| {
            let h = g.layer_norm(v[0], v[3], v[4], 1e-5)?;
            let q = g.matmul(h, v[1])?;
            let k = g.matmul(h, v[2])?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, 1.0 / 6f64.sqrt())?;
            let scores = g.mask_fill(scores, causal_mask(4))?;
            let attn = g.softmax_rows(scores)?;
            let out = g.matmul(attn, h)?;
            let out = g.gelu(out)?;
            g.cross_entropy_masked(out, &[1, 0, 5, 2], &[true, true, false, true])
        },
        1e-5,
    )?;
    println!(
        "checked {} entries: max relative error {:.2e}, max absolute error {:.2e}",
        report.checked, report.max_rel_error, report.max_abs_error
    );
    assert!(report.passes(1e-4), "{report:?}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
