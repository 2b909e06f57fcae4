// A LoRA adapter with rank 8 and alpha 32 scales its update by 4 and leaves
// the frozen weight's output untouched until B moves away from zero.

use alignlab::autodiff::{Graph, Tensor};
use alignlab::nn::{lora_forward, LoraConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> alignlab::Result<()> {
    let cfg = LoraConfig::default();
    println!("rank {} alpha {} scaling {}", cfg.rank, cfg.alpha, cfg.scaling());

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d_in, d_out, n) = (12, 10, 3);
    let w = Tensor::randn(&[d_out, d_in], 0.3, &mut rng);
    let a = Tensor::randn(&[cfg.rank, d_in], 0.1, &mut rng);
    let x = Tensor::randn(&[d_in, n], 1.0, &mut rng);

    let plain = {
        let mut g = Graph::new();
        let (vw, vx) = (g.leaf(&w, false), g.leaf(&x, false));
        let y = g.matmul(vw, vx)?;
        g.to_tensor(y)
    };
    let adapted = lora_forward(&w, &a, &Tensor::zeros(&[d_out, cfg.rank]), cfg.alpha, &x)?;
    assert_eq!(plain.data(), adapted.data());
    println!("zero B: output identical to the frozen weight's");

    let b = Tensor::randn(&[d_out, cfg.rank], 0.05, &mut rng);
    let moved = lora_forward(&w, &a, &b, cfg.alpha, &x)?;
    let shift: f64 = moved.data().iter().zip(plain.data()).map(|(p, q)| (p - q).abs()).sum();
    println!("trained B: total output shift {shift:.4}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> alignlab::Result<()> {
    run_example()
}
