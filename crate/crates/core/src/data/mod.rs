pub mod batcher;
pub mod manifest;
pub mod synth;

pub use batcher::{pack_lengths, padded_cost, sample_points, DynamicBatcher, TOY_CAP};
pub use manifest::{
    build_lexicon, build_manifests, spec_for_split, CorpusSpec, Manifest, ManifestEntry, Manifests, Split,
};
pub use synth::{
    accent_warp, apply_warp, derive_seed, read_feature_dump, synth_utterance, write_feature_dump, Perturbation, SynthSpec, Synthesizer, DEFAULT_ALPHABET,
    DEFAULT_PROMPT,
};
