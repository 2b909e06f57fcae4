use serde::{Deserialize, Serialize};

use super::layers::{sinusoid_table, LayerNorm, Linear, SelfAttentionBlock};
use super::params::{Group, ParamStore, Session};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Toy analogs of a supervised (Whisper-like) and a self-supervised
/// (HuBERT-like) speech foundation encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    SupervisedAnalog,
    SslAnalog,
}

impl EncoderVariant {
    pub fn default_out_dim(self) -> usize {
        match self {
            EncoderVariant::SupervisedAnalog => 40,
            EncoderVariant::SslAnalog => 32,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderVariant::SupervisedAnalog => "supervised-analog",
            EncoderVariant::SslAnalog => "ssl-analog",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// `None` resolves to the variant's default width.
    pub out_dim: Option<usize>,
    pub d_feat: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub subsampling_factor: usize,
    pub ffn_hidden: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::for_variant(EncoderVariant::SslAnalog)
    }
}

impl EncoderConfig {
    pub fn for_variant(variant: EncoderVariant) -> Self {
        Self {
            variant,
            out_dim: None,
            d_feat: 16,
            n_layers: 2,
            n_heads: 4,
            subsampling_factor: 4,
            ffn_hidden: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim.unwrap_or_else(|| self.variant.default_out_dim())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(2 * self.out_dim())
    }

    pub fn resolve(&mut self) {
        self.out_dim = Some(self.out_dim());
        self.ffn_hidden = Some(self.ffn_hidden());
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.out_dim();
        if d == 0 || self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder out_dim {d} must be a positive multiple of n_heads {}",
                self.n_heads
            )));
        }
        if self.subsampling_factor == 0 {
            return Err(Error::Config("encoder subsampling_factor must be at least 1".into()));
        }
        if self.d_feat == 0 {
            return Err(Error::Config("encoder d_feat must be positive".into()));
        }
        Ok(())
    }

    /// Encoder output length for `t_s` input frames.
    pub fn output_len(&self, t_s: usize) -> usize {
        t_s.div_ceil(self.subsampling_factor)
    }
}

/// Frame-stacking subsampler, sinusoidal positions, bidirectional
/// self-attention blocks and a final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: Linear,
    pub blocks: Vec<SelfAttentionBlock>,
    pub ln_out: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.out_dim();
        let stem = Linear::new(
            store,
            "encoder.stem",
            config.subsampling_factor * config.d_feat,
            d,
            true,
            Group::Encoder,
        )?;
        let blocks = (0..config.n_layers)
            .map(|i| {
                SelfAttentionBlock::new(
                    store,
                    &format!("encoder.block{i}"),
                    d,
                    config.n_heads,
                    config.ffn_hidden(),
                    Group::Encoder,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNorm::new(store, "encoder.ln_out", d, Group::Encoder)?;
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            ln_out,
        })
    }

    /// `[T_s × d_feat]` features to `[ceil(T_s / factor) × out_dim]`.
    pub fn encode<'p>(&self, s: &mut Session<'p>, features: &'p Tensor) -> Result<Var> {
        if features.numel() == 0 {
            return Err(Error::EmptyUtterance);
        }
        if features.cols() != self.config.d_feat {
            return Err(Error::Shape(format!(
                "encoder expects {} feature channels, got {}",
                self.config.d_feat,
                features.cols()
            )));
        }
        let x = s.g.leaf(features, false);
        self.encode_var(s, x)
    }

    pub fn encode_var(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let stacked = s.g.stack_frames(x, self.config.subsampling_factor)?;
        let h = self.stem.forward(s, stacked)?;
        let (t_e, d) = s.g.shape(h);
        let pos = s.g.constant(t_e, d, sinusoid_table(t_e, d))?;
        let mut h = s.g.add(h, pos)?;
        for block in &self.blocks {
            h = block.forward(s, h, None)?;
        }
        self.ln_out.forward(s, h)
    }
}
