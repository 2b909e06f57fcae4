use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use super::layers::Linear;
use super::lm::{DecoderLm, DecoderLmConfig};
use super::lora::LoraConfig;
use super::params::{Group, Init, ParamId, ParamStore, Session};
use super::projector::{Projector, ProjectorConfig};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Order in which the speech, prompt and transcript embeddings are concatenated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConcatOrder {
    #[default]
    SpeechPromptTranscript,
    PromptSpeechTranscript,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub lm: DecoderLmConfig,
    pub lora: LoraConfig,
    /// Build the LM without adapters (used to check adapter transparency).
    pub disable_lora: bool,
    pub concat_order: ConcatOrder,
    /// Identity-initialise the bridge when encoder and LM widths agree.
    pub identity_bridge: bool,
}

impl ModelConfig {
    pub fn resolve(&mut self) {
        self.encoder.resolve();
        self.projector.resolve();
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projector.validate(self.encoder.out_dim())?;
        self.lm.validate()?;
        self.lora.validate()
    }
}

/// Affine map from the encoder width to the LM embedding width. Bias starts at zero.
#[derive(Clone, Debug)]
pub struct Bridge {
    pub linear: Linear,
}

impl Bridge {
    pub fn new(store: &mut ParamStore, d_in: usize, d_out: usize, identity: bool) -> Result<Self> {
        let init = if identity && d_in == d_out {
            Init::Identity
        } else {
            Init::Normal(1.0 / (d_in as f64).sqrt())
        };
        Ok(Self {
            linear: Linear::with_init(store, "bridge", d_in, d_out, true, Group::Bridge, init)?,
        })
    }

    pub fn bridge(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let cols = s.g.shape(x).1;
        if cols != self.linear.d_in {
            return Err(Error::Config(format!(
                "bridge maps encoder width {} to LM width {} but received {cols} columns",
                self.linear.d_in, self.linear.d_out
            )));
        }
        self.linear.forward(s, x)
    }
}

/// Encoder, projector, bridge and decoder LM sharing one parameter store.
#[derive(Clone, Debug)]
pub struct PipelineModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub projector: Projector,
    pub bridge: Bridge,
    pub lm: DecoderLm,
}

impl PipelineModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.resolve();
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let encoder = Encoder::new(&mut store, &config.encoder)?;
        let dim = config.encoder.out_dim();
        let projector = Projector::new(&mut store, &config.projector, dim)?;
        let bridge = Bridge::new(&mut store, dim, config.lm.embed_dim, config.identity_bridge)?;
        let lora = (!config.disable_lora).then_some(&config.lora);
        let lm = DecoderLm::new(&mut store, &config.lm, lora)?;
        Ok(Self {
            config,
            store,
            encoder,
            projector,
            bridge,
            lm,
        })
    }

    pub fn groups(&self) -> BTreeMap<Group, Vec<ParamId>> {
        let mut out: BTreeMap<Group, Vec<ParamId>> = BTreeMap::new();
        for (id, p) in self.store.iter() {
            out.entry(p.group).or_default().push(id);
        }
        out
    }

    /// Number of scalar weights in a group.
    pub fn group_size(&self, group: Group) -> usize {
        self.store.count(group)
    }

    /// `E_s = Bridge(Projector(Encoder(S)))` for one utterance.
    pub fn speech_embeddings<'p>(&'p self, s: &mut Session<'p>, features: &'p crate::autodiff::Tensor) -> Result<Var> {
        let h = self.encoder.encode(s, features)?;
        let p = self.projector.project(s, h)?;
        self.bridge.bridge(s, p)
    }
}
