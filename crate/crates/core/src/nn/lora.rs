use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{Group, Init, ParamId, ParamStore, Session};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Low-rank update `scaling · B·A` attached to one frozen weight matrix.
///
/// `A` is `[rank × d_in]` with small random entries, `B` is `[d_out × rank]`
/// and starts at zero, so a fresh adapter leaves its target unchanged.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub target: String,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(store: &mut ParamStore, target: &str, d_in: usize, d_out: usize, cfg: &LoraConfig) -> Result<Self> {
        cfg.validate()?;
        let a = store.add(
            &format!("{target}.lora_a"),
            Group::Lora,
            true,
            &[cfg.rank, d_in],
            Init::Normal(1.0 / (d_in as f64).sqrt()),
        )?;
        let b = store.add(
            &format!("{target}.lora_b"),
            Group::Lora,
            true,
            &[d_out, cfg.rank],
            Init::Zeros,
        )?;
        Ok(Self {
            target: target.to_string(),
            a,
            b,
            rank: cfg.rank,
            alpha: cfg.alpha,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `scaling · (x·Aᵀ)·Bᵀ` for row-vector inputs.
    pub fn delta(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let a = s.p(self.a);
        let b = s.p(self.b);
        let xa = s.g.matmul_nt(x, a)?;
        let xab = s.g.matmul_nt(xa, b)?;
        s.g.scale(xab, self.scaling())
    }

    /// Base projection plus the adapter's low-rank delta.
    pub fn forward(&self, s: &mut Session<'_>, base: &Linear, x: Var) -> Result<Var> {
        let y = base.forward(s, x)?;
        let d = self.delta(s, x)?;
        s.g.add(y, d)
    }
}

/// Stand-alone form on plain tensors, with column-vector convention:
/// `x` is `[d_in × n]`, `base_weight` is `[d_out × d_in]`, `a` is `[rank × d_in]`
/// and `b` is `[d_out × rank]`. Returns `W·x + (alpha/rank)·B·(A·x)`.
pub fn lora_forward(base_weight: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, x: &Tensor) -> Result<Tensor> {
    let rank = a.rows();
    LoraConfig { rank, alpha }.validate()?;
    if b.cols() != rank {
        return Err(Error::Shape(format!(
            "LoRA B has {} columns but A has rank {rank}",
            b.cols()
        )));
    }
    let mut g = Graph::new();
    let (w, a, b, x) = (g.leaf(base_weight, false), g.leaf(a, false), g.leaf(b, false), g.leaf(x, false));
    let base = g.matmul(w, x)?;
    let ax = g.matmul(a, x)?;
    let bax = g.matmul(b, ax)?;
    let delta = g.scale(bax, alpha / rank as f64)?;
    let out = g.add(base, delta)?;
    Ok(g.to_tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_eight_alpha_thirtytwo_scales_by_four() {
        let cfg = LoraConfig::default();
        assert_eq!(cfg.rank, 8);
        assert_eq!(cfg.alpha, 32.0);
        assert_eq!(cfg.scaling(), 4.0);
    }

    #[test]
    fn scalar_hand_case() {
        let w = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let a = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
        let y = lora_forward(&w, &a, &b, 1.0, &x).unwrap();
        assert_eq!(y.data(), &[25.0]);
    }

    #[test]
    fn zero_b_is_exact_no_op() {
        let mut store = ParamStore::new(3);
        let base = Linear::new(&mut store, "w", 6, 5, false, Group::LmBody).unwrap();
        let adapter = LoraAdapter::new(&mut store, "w", 6, 5, &LoraConfig::default()).unwrap();
        let x = Tensor::randn(&[4, 6], 1.0, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1));
        let mut s = Session::new(&store);
        let xv = s.g.leaf(&x, false);
        let plain = base.forward(&mut s, xv).unwrap();
        let adapted = adapter.forward(&mut s, &base, xv).unwrap();
        let (p, q) = (s.g.value(plain).to_vec(), s.g.value(adapted).to_vec());
        assert!(p.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bad_config_rejected() {
        assert!(LoraConfig { rank: 0, alpha: 32.0 }.validate().is_err());
        assert!(LoraConfig { rank: 8, alpha: 0.0 }.validate().is_err());
        let w = Tensor::zeros(&[1, 1]);
        let a = Tensor::zeros(&[1, 1]);
        assert!(matches!(lora_forward(&w, &a, &a, -1.0, &w), Err(Error::Config(_))));
    }

    #[test]
    fn base_weight_gets_no_gradient() {
        let mut store = ParamStore::new(0);
        let base = Linear::new(&mut store, "w", 3, 2, false, Group::LmBody).unwrap();
        let adapter = LoraAdapter::new(&mut store, "w", 3, 2, &LoraConfig { rank: 2, alpha: 4.0 }).unwrap();
        store.set_trainable(&[Group::Lora].into()).unwrap();
        let x = Tensor::filled(&[2, 3], 0.5);
        let mut s = Session::new(&store);
        let xv = s.g.leaf(&x, false);
        let y = adapter.forward(&mut s, &base, xv).unwrap();
        let l = s.g.sum(y).unwrap();
        s.g.backward(l).unwrap();
        let grads = s.gradients();
        assert!(grads.get(base.weight).is_none());
        // B starts at zero so only B receives signal on the first step
        assert!(grads.get(adapter.b).unwrap().iter().any(|&v| v != 0.0));
        assert!(grads.get(adapter.a).unwrap().iter().all(|&v| v == 0.0));
    }
}
