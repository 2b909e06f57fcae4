//! Model building blocks: toy speech encoders, both projector kinds, the
//! dimension bridge, the decoder-only LM and LoRA adapters.

pub mod checkpoint;
pub mod encoder;
pub mod layers;
pub mod lm;
pub mod lora;
pub mod model;
pub mod params;
pub mod projector;

pub use checkpoint::Checkpoint;
pub use layers::{FeedForward, LayerNorm, Linear};
pub use encoder::{Encoder, EncoderConfig, EncoderVariant};
pub use lm::{ChatTemplate, DecoderLm, DecoderLmConfig, Region, TextRole, Vocab};
pub use lora::{lora_forward, LoraAdapter, LoraConfig};
pub use model::{Bridge, ConcatOrder, ModelConfig, PipelineModel};
pub use params::{Gradients, Group, Init, Param, ParamId, ParamStore, Session};
pub use projector::{Projector, ProjectorConfig, ProjectorKind};
