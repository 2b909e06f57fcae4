//! Deterministic synthetic speech: each character owns a fixed prototype
//! block of `frames_per_char × d_feat` features; an utterance is the
//! concatenation of its characters' blocks plus seeded Gaussian noise.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pipeline::Sample;

pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";
pub const DEFAULT_PROMPT: &str = "transcribe the speech";

/// Acoustic condition applied on top of the clean synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Perturbation {
    None,
    /// Replaces the noise level with `std`.
    Noise { std: f64 },
    /// Multiplies every frame by a fixed invertible channel-warp matrix.
    Accent { strength: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Characters transcripts are drawn from.
    pub alphabet: String,
    pub frames_per_char: usize,
    pub d_feat: usize,
    pub noise_std: f64,
    pub perturbation: Perturbation,
    pub prompt: String,
    /// Seeds the codebook and the accent warp.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            alphabet: DEFAULT_ALPHABET.into(),
            frames_per_char: 4,
            d_feat: 16,
            noise_std: 0.2,
            perturbation: Perturbation::None,
            prompt: DEFAULT_PROMPT.into(),
            seed: 7,
        }
    }
}

/// SplitMix64 finaliser over `base` and `salt`; used for every derived seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Prototype codebook plus (for accent perturbation) the channel warp.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub spec: SynthSpec,
    alphabet: Vec<char>,
    /// One row of `frames_per_char · d_feat` values per character.
    prototypes: Vec<Vec<f64>>,
    warp: Option<Vec<f64>>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_char == 0 {
            return Err(Error::Config("frames_per_char must be at least 1".into()));
        }
        if self.d_feat == 0 {
            return Err(Error::Config("d_feat must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        let chars: Vec<char> = self.alphabet.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("empty alphabet".into()));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::Config(format!("alphabet lists {c:?} twice")));
            }
        }
        if chars.len() > self.frames_per_char * self.d_feat {
            return Err(Error::Config(format!(
                "{} characters cannot have orthogonal prototypes in {} dimensions",
                chars.len(),
                self.frames_per_char * self.d_feat
            )));
        }
        Ok(())
    }

    pub fn with_perturbation(&self, perturbation: Perturbation) -> Self {
        Self {
            perturbation,
            ..self.clone()
        }
    }

    /// Distance every pair of prototypes must keep for the mapping to stay learnable.
    pub fn separation_threshold(&self) -> f64 {
        4.0 * self.noise_std * ((self.d_feat * self.frames_per_char) as f64).sqrt()
    }
}

impl Synthesizer {
    /// Builds the codebook and checks that prototypes are separable at the
    /// synthesis noise level.
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let alphabet: Vec<char> = spec.alphabet.chars().collect();
        let dim = spec.frames_per_char * spec.d_feat;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        // Gram-Schmidt over Gaussian draws, then unit RMS per prototype.
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(alphabet.len());
        while prototypes.len() < alphabet.len() {
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            for p in &prototypes {
                let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
            }
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / dim as f64).sqrt();
            if rms < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= rms);
            prototypes.push(v);
        }
        let threshold = spec.separation_threshold();
        for i in 0..prototypes.len() {
            for j in i + 1..prototypes.len() {
                let d = l2(&prototypes[i], &prototypes[j]);
                if d < threshold {
                    return Err(Error::Config(format!(
                        "prototypes {:?} and {:?} are {d:.3} apart, below the separability bound {threshold:.3}",
                        alphabet[i], alphabet[j]
                    )));
                }
            }
        }
        let warp = match spec.perturbation {
            Perturbation::Accent { strength } => Some(accent_warp(spec.d_feat, strength, derive_seed(spec.seed, 2))),
            _ => None,
        };
        Ok(Self {
            spec: spec.clone(),
            alphabet,
            prototypes,
            warp,
        })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn prototype(&self, c: char) -> Option<&[f64]> {
        self.alphabet.iter().position(|&x| x == c).map(|i| self.prototypes[i].as_slice())
    }

    /// Smallest pairwise prototype distance.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.prototypes.len() {
            for j in i + 1..self.prototypes.len() {
                best = best.min(l2(&self.prototypes[i], &self.prototypes[j]));
            }
        }
        best
    }

    /// The accent warp (`d_feat × d_feat`, row-major), when configured.
    pub fn warp(&self) -> Option<&[f64]> {
        self.warp.as_deref()
    }

    pub fn noise_std(&self) -> f64 {
        match self.spec.perturbation {
            Perturbation::Noise { std } => std,
            _ => self.spec.noise_std,
        }
    }

    /// Features `[len(transcript)·frames_per_char × d_feat]` for a transcript.
    pub fn features(&self, transcript: &str, seed: u64) -> Result<Tensor> {
        let d = self.spec.d_feat;
        let fpc = self.spec.frames_per_char;
        let chars: Vec<char> = transcript.chars().collect();
        let bad: Vec<char> = chars.iter().copied().filter(|c| self.prototype(*c).is_none()).collect();
        if !bad.is_empty() {
            return Err(Error::Data(format!("cannot synthesize characters {bad:?}")));
        }
        if chars.is_empty() {
            return Err(Error::EmptyUtterance);
        }
        let mut data = Vec::with_capacity(chars.len() * fpc * d);
        for c in &chars {
            data.extend_from_slice(self.prototype(*c).expect("checked above"));
        }
        let std = self.noise_std();
        if std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, std).expect("positive std");
            data.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
        if let Some(w) = &self.warp {
            apply_warp(&mut data, d, w);
        }
        Tensor::new(vec![chars.len() * fpc, d], data)
    }

    pub fn utterance(&self, utt_id: &str, transcript: &str, seed: u64) -> Result<Sample> {
        Ok(Sample {
            utt_id: utt_id.to_string(),
            features: self.features(transcript, seed)?,
            prompt: self.spec.prompt.clone(),
            transcript: transcript.to_string(),
        })
    }
}

/// `synth_utterance` in one call; builds the codebook each time.
pub fn synth_utterance(spec: &SynthSpec, transcript: &str, seed: u64) -> Result<Sample> {
    Synthesizer::new(spec)?.utterance("utt", transcript, seed)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unit upper-triangular mixing times a positive channel gain: invertible by
/// construction (determinant = product of gains).
pub fn accent_warp(d: usize, strength: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        let gain = 1.0 + strength * rng.random_range(-0.5..0.5);
        w[i * d + i] = gain;
        for j in i + 1..d {
            w[i * d + j] = gain * strength * normal.sample(&mut rng) / (d as f64).sqrt();
        }
    }
    w
}

/// Multiplies every `d`-wide frame of `data` by the row-major `d × d` matrix `w`.
pub fn apply_warp(data: &mut [f64], d: usize, w: &[f64]) {
    for frame in data.chunks_mut(d) {
        let src = frame.to_vec();
        for (i, out) in frame.iter_mut().enumerate() {
            *out = (0..d).map(|j| w[i * d + j] * src[j]).sum();
        }
    }
}

/// Writes one feature matrix as `b"ALFEAT01" | u64 rows | u64 cols | f64 LE …`.
pub fn write_feature_dump(path: &Path, features: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(24 + features.numel() * 8);
    out.write_all(b"ALFEAT01").expect("vec write");
    out.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_feature_dump(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 24 || &buf[..8] != b"ALFEAT01" {
        return Err(Error::Data(format!("{} is not a feature dump", path.display())));
    }
    let rows = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(buf[16..24].try_into().expect("8 bytes")) as usize;
    let body = &buf[24..];
    if body.len() != rows * cols * 8 {
        return Err(Error::Data(format!("{}: truncated feature dump", path.display())));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(vec![rows, cols], data)
}

pub(crate) fn utterance_seed(base: u64, split_salt: u64, index: u64) -> u64 {
    derive_seed(derive_seed(base, split_salt), index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_law() {
        let s = synth_utterance(&SynthSpec::default(), "abc", 1).unwrap();
        assert_eq!(s.features.shape(), &[12, 16]);
    }

    #[test]
    fn noiseless_ignores_seed() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let a = synth_utterance(&spec, "a1", 1).unwrap();
        let b = synth_utterance(&spec, "a1", 2).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = SynthSpec::default();
        let a = synth_utterance(&spec, "hello", 9).unwrap();
        let b = synth_utterance(&spec, "hello", 9).unwrap();
        assert!(a.features.data().iter().zip(b.features.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = synth_utterance(&spec, "hello", 10).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn out_of_alphabet_rejected() {
        assert!(matches!(
            synth_utterance(&SynthSpec::default(), "ab!", 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn prototypes_orthogonal_and_separable() {
        let syn = Synthesizer::new(&SynthSpec::default()).unwrap();
        // orthogonal unit-RMS vectors of dimension 64 sit sqrt(2·64) apart
        assert!((syn.min_separation() - (128f64).sqrt()).abs() < 1e-9);
        assert!(syn.min_separation() >= SynthSpec::default().separation_threshold());
    }

    #[test]
    fn too_noisy_spec_is_refused() {
        let spec = SynthSpec {
            noise_std: 0.5,
            ..SynthSpec::default()
        };
        assert!(matches!(Synthesizer::new(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn accent_warp_is_shared_and_invertible() {
        let spec = SynthSpec::default().with_perturbation(Perturbation::Accent { strength: 0.6 });
        let a = Synthesizer::new(&spec).unwrap();
        let b = Synthesizer::new(&spec).unwrap();
        assert_eq!(a.warp(), b.warp());
        let w = a.warp().unwrap();
        let d = spec.d_feat;
        let det: f64 = (0..d).map(|i| w[i * d + i]).product();
        assert!(det.abs() > 1e-3);
        for i in 0..d {
            for j in 0..i {
                assert_eq!(w[i * d + j], 0.0);
            }
        }
    }

    #[test]
    fn feature_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let s = synth_utterance(&SynthSpec::default(), "xyz", 4).unwrap();
        write_feature_dump(&p, &s.features).unwrap();
        assert_eq!(read_feature_dump(&p).unwrap(), s.features);
    }
}
