use super::lora::{LoraAdapter, LoraConfig};
use super::params::{Group, Init, ParamId, ParamStore, Session};
use crate::autodiff::Var;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·Wᵀ + b` with `W` stored as `[out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, group: Group) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, bias, group, Init::Normal(1.0 / (d_in as f64).sqrt()))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: Group,
        init: Init,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), group, true, &[d_out, d_in], init)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), group, false, &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let y = s.g.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.p(b);
                s.g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), group, false, &[dim], Init::Ones)?,
            beta: store.add(&format!("{name}.beta"), group, false, &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.g.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, group: Group) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, group)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, group)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.g.gelu(h)?;
        self.down.forward(s, h)
    }
}

/// Multi-head scaled dot-product attention with optional LoRA on the query
/// and value projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub lora_q: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize, group: Group) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "{name}: width {dim} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, group)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, group)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, group)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, group)?,
            n_heads,
            lora_q: None,
            lora_v: None,
        })
    }

    pub fn attach_lora(&mut self, store: &mut ParamStore, name: &str, cfg: &LoraConfig) -> Result<()> {
        let d = self.q.d_in;
        self.lora_q = Some(LoraAdapter::new(store, &format!("{name}.q"), d, d, cfg)?);
        self.lora_v = Some(LoraAdapter::new(store, &format!("{name}.v"), d, d, cfg)?);
        Ok(())
    }

    /// `queries` is `[n × d]`, `keys` is `[m × d]`; `mask` (row-major `n × m`,
    /// true = blocked) is applied to every head.
    pub fn forward(&self, s: &mut Session<'_>, queries: Var, keys: Var, mask: Option<&[bool]>) -> Result<Var> {
        let q = match &self.lora_q {
            Some(a) => a.forward(s, &self.q, queries)?,
            None => self.q.forward(s, queries)?,
        };
        let k = self.k.forward(s, keys)?;
        let v = match &self.lora_v {
            Some(a) => a.forward(s, &self.v, keys)?,
            None => self.v.forward(s, keys)?,
        };
        let d = self.q.d_out;
        let hd = d / self.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    s.g.slice_cols(q, h * hd, hd)?,
                    s.g.slice_cols(k, h * hd, hd)?,
                    s.g.slice_cols(v, h * hd, hd)?,
                )
            };
            let scores = s.g.matmul_nt(qh, kh)?;
            let scores = s.g.scale(scores, scale)?;
            let scores = match mask {
                Some(m) => s.g.mask_fill(scores, m.to_vec())?,
                None => scores,
            };
            let probs = s.g.softmax_rows(scores)?;
            heads.push(s.g.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            s.g.concat_cols(&heads)?
        };
        self.o.forward(s, merged)
    }
}

/// Pre-norm self-attention block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize, ffn_hidden: usize, group: Group) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, group)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, n_heads, group)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, group)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_hidden, group)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(s, x)?;
        let a = self.attn.forward(s, h, h, mask)?;
        let x = s.g.add(x, a)?;
        let h = self.ln2.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        s.g.add(x, f)
    }
}

/// Fixed sinusoidal position table, `[rows × dim]`.
pub fn sinusoid_table(rows: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dim];
    for pos in 0..rows {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
