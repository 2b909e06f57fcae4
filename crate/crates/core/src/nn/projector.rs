use serde::{Deserialize, Serialize};

use super::layers::{Attention, FeedForward, LayerNorm, SelfAttentionBlock};
use super::params::{Group, Init, ParamId, ParamStore, Session};
use crate::autodiff::Var;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorKind {
    Transformer,
    Qformer,
}

impl ProjectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectorKind::Transformer => "transformer",
            ProjectorKind::Qformer => "qformer",
        }
    }
}

/// Unset fields resolve per kind: the transformer projector has 4 layers with
/// a 2× feed-forward, the Q-Former 2 layers, window 1, one query and a 4×
/// feed-forward. The two defaults carry about the same number of weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub kind: ProjectorKind,
    pub n_layers: Option<usize>,
    pub n_heads: usize,
    pub window_length: usize,
    pub n_queries: usize,
    pub ffn_mult: Option<usize>,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self::for_kind(ProjectorKind::Transformer)
    }
}

impl ProjectorConfig {
    pub fn for_kind(kind: ProjectorKind) -> Self {
        Self {
            kind,
            n_layers: None,
            n_heads: 4,
            window_length: 1,
            n_queries: 1,
            ffn_mult: None,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers.unwrap_or(match self.kind {
            ProjectorKind::Transformer => 4,
            ProjectorKind::Qformer => 2,
        })
    }

    pub fn ffn_mult(&self) -> usize {
        self.ffn_mult.unwrap_or(match self.kind {
            ProjectorKind::Transformer => 2,
            ProjectorKind::Qformer => 4,
        })
    }

    pub fn resolve(&mut self) {
        self.n_layers = Some(self.n_layers());
        self.ffn_mult = Some(self.ffn_mult());
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_heads == 0 || !dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "projector width {dim} is not divisible by {} heads",
                self.n_heads
            )));
        }
        if self.kind == ProjectorKind::Qformer && (self.window_length == 0 || self.n_queries == 0) {
            return Err(Error::Config("qformer window_length and n_queries must be positive".into()));
        }
        Ok(())
    }

    /// Number of output frames for `t_e` encoder frames.
    pub fn output_len(&self, t_e: usize) -> usize {
        match self.kind {
            ProjectorKind::Transformer => t_e,
            ProjectorKind::Qformer => t_e.div_ceil(self.window_length) * self.n_queries,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QformerLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_query: LayerNorm,
    pub ln_frames: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub enum ProjectorBody {
    Transformer(Vec<SelfAttentionBlock>),
    Qformer {
        queries: ParamId,
        layers: Vec<QformerLayer>,
    },
}

/// Maps encoder frames to a sequence of the same width.
#[derive(Clone, Debug)]
pub struct Projector {
    pub config: ProjectorConfig,
    pub dim: usize,
    pub body: ProjectorBody,
    pub ln_out: LayerNorm,
}

impl Projector {
    pub fn new(store: &mut ParamStore, config: &ProjectorConfig, dim: usize) -> Result<Self> {
        config.validate(dim)?;
        let g = Group::Projector;
        let hidden = config.ffn_mult() * dim;
        let body = match config.kind {
            ProjectorKind::Transformer => ProjectorBody::Transformer(
                (0..config.n_layers())
                    .map(|i| SelfAttentionBlock::new(store, &format!("projector.block{i}"), dim, config.n_heads, hidden, g))
                    .collect::<Result<_>>()?,
            ),
            ProjectorKind::Qformer => {
                let queries = store.add(
                    "projector.queries",
                    g,
                    false,
                    &[config.n_queries, dim],
                    Init::Normal(1.0),
                )?;
                let layers = (0..config.n_layers())
                    .map(|i| {
                        let n = format!("projector.layer{i}");
                        Ok(QformerLayer {
                            ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), dim, g)?,
                            self_attn: Attention::new(store, &format!("{n}.self_attn"), dim, config.n_heads, g)?,
                            ln_query: LayerNorm::new(store, &format!("{n}.ln_query"), dim, g)?,
                            ln_frames: LayerNorm::new(store, &format!("{n}.ln_frames"), dim, g)?,
                            cross_attn: Attention::new(store, &format!("{n}.cross_attn"), dim, config.n_heads, g)?,
                            ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), dim, g)?,
                            ffn: FeedForward::new(store, &format!("{n}.ffn"), dim, hidden, g)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                ProjectorBody::Qformer { queries, layers }
            }
        };
        let ln_out = LayerNorm::new(store, "projector.ln_out", dim, g)?;
        Ok(Self {
            config: config.clone(),
            dim,
            body,
            ln_out,
        })
    }

    pub fn project(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let (t_e, d) = s.g.shape(h);
        if t_e == 0 {
            return Err(Error::EmptyUtterance);
        }
        if d != self.dim {
            return Err(Error::Shape(format!(
                "projector built for width {} received {d}",
                self.dim
            )));
        }
        let out = match &self.body {
            ProjectorBody::Transformer(blocks) => {
                let mut x = h;
                for b in blocks {
                    x = b.forward(s, x, None)?;
                }
                x
            }
            ProjectorBody::Qformer { queries, layers } => {
                let w = self.config.window_length;
                let nq = self.config.n_queries;
                let windows = t_e.div_ceil(w);
                let t_p = windows * nq;
                let ids: Vec<usize> = (0..t_p).map(|r| r % nq).collect();
                let table = s.p(*queries);
                let mut q = s.g.embedding(table, &ids)?;
                let (self_mask, cross_mask) = window_masks(t_e, w, nq);
                for layer in layers {
                    let hq = layer.ln_self.forward(s, q)?;
                    let a = layer.self_attn.forward(s, hq, hq, Some(&self_mask))?;
                    q = s.g.add(q, a)?;
                    let hq = layer.ln_query.forward(s, q)?;
                    let hf = layer.ln_frames.forward(s, h)?;
                    let c = layer.cross_attn.forward(s, hq, hf, Some(&cross_mask))?;
                    q = s.g.add(q, c)?;
                    let hq = layer.ln_ffn.forward(s, q)?;
                    let f = layer.ffn.forward(s, hq)?;
                    q = s.g.add(q, f)?;
                }
                q
            }
        };
        self.ln_out.forward(s, out)
    }
}

/// Attention masks (true = blocked) for windowed queries: queries only see
/// queries of their own window, and only the encoder frames inside it.
pub fn window_masks(t_e: usize, window: usize, n_queries: usize) -> (Vec<bool>, Vec<bool>) {
    let windows = t_e.div_ceil(window);
    let t_p = windows * n_queries;
    let mut self_mask = vec![true; t_p * t_p];
    let mut cross_mask = vec![true; t_p * t_e];
    for r in 0..t_p {
        let w = r / n_queries;
        for c in 0..t_p {
            if c / n_queries == w {
                self_mask[r * t_p + c] = false;
            }
        }
        for f in w * window..((w + 1) * window).min(t_e) {
            cross_mask[r * t_e + f] = false;
        }
    }
    (self_mask, cross_mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_masks_cover_each_frame_once() {
        let (sm, cm) = window_masks(7, 2, 1);
        assert_eq!(sm.len(), 16);
        assert_eq!(cm.len(), 4 * 7);
        for f in 0..7 {
            let seen = (0..4).filter(|&r| !cm[r * 7 + f]).count();
            assert_eq!(seen, 1);
        }
        // last window holds only frame 6
        assert_eq!((0..7).filter(|&f| !cm[3 * 7 + f]).collect::<Vec<_>>(), vec![6]);
    }

    #[test]
    fn output_len_arithmetic() {
        let t = ProjectorConfig::for_kind(ProjectorKind::Transformer);
        assert_eq!(t.output_len(7), 7);
        let mut q = ProjectorConfig::for_kind(ProjectorKind::Qformer);
        assert_eq!(q.output_len(7), 7);
        q.window_length = 2;
        assert_eq!(q.output_len(7), 4);
        q.n_queries = 3;
        assert_eq!(q.output_len(7), 12);
    }

    #[test]
    fn defaults_per_kind() {
        let q = ProjectorConfig::for_kind(ProjectorKind::Qformer);
        assert_eq!((q.n_layers(), q.window_length, q.n_queries), (2, 1, 1));
        assert_eq!(ProjectorConfig::for_kind(ProjectorKind::Transformer).n_layers(), 4);
    }
}
