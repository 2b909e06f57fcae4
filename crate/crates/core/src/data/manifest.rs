use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{utterance_seed, Perturbation, SynthSpec, Synthesizer};
use crate::error::{Error, Result};
use crate::pipeline::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestClean,
    TestNoisy,
    TestAccent,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::TestClean, Split::TestNoisy, Split::TestAccent];
    pub const TESTS: [Split; 3] = [Split::TestClean, Split::TestNoisy, Split::TestAccent];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestClean => "test_clean",
            Split::TestNoisy => "test_noisy",
            Split::TestAccent => "test_accent",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 11,
            Split::TestClean => 12,
            Split::TestNoisy => 13,
            Split::TestAccent => 14,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub transcript: String,
    pub seed: u64,
    /// Times the utterance is visited per epoch.
    pub weight: u32,
    pub split: Split,
}

/// Utterance listing; one `utt_id  transcript  seed  weight  split` line per entry.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::Data(format!("duplicate utt_id `{}`", e.utt_id)));
            }
            if e.weight == 0 {
                return Err(Error::Data(format!("utterance `{}` has weight 0", e.utt_id)));
            }
            if e.utt_id.contains(['\t', '\n']) || e.transcript.contains(['\t', '\n']) {
                return Err(Error::Data(format!("utterance `{}` contains a tab or newline", e.utt_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_weight(&self) -> u64 {
        self.entries.iter().map(|e| u64::from(e.weight)).sum()
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utt_id == utt_id)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.utt_id, e.transcript, e.seed, e.weight, e.split
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::Data(format!("manifest line {}: {what}: {line:?}", n + 1));
            if cols.len() != 5 {
                return Err(bad("expected 5 tab-separated columns"));
            }
            entries.push(ManifestEntry {
                utt_id: cols[0].to_string(),
                transcript: cols[1].to_string(),
                seed: cols[2].parse().map_err(|_| bad("bad seed"))?,
                weight: cols[3].parse().map_err(|_| bad("bad weight"))?,
                split: cols[4].parse()?,
            });
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Synthesizes every entry in manifest order.
    pub fn samples(&self, synth: &Synthesizer) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| synth.utterance(&e.utt_id, &e.transcript, e.seed))
            .collect()
    }
}

/// Corpus sizes and the test-set acoustic conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Training utterances visited once per epoch.
    pub train_single: usize,
    /// Training utterances visited `replicated_weight` times per epoch.
    pub train_replicated: usize,
    pub replicated_weight: u32,
    /// Utterances per test set.
    pub test_size: usize,
    pub lexicon_size: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub noisy_std: f64,
    pub accent_strength: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            train_single: 150,
            train_replicated: 50,
            replicated_weight: 3,
            test_size: 40,
            lexicon_size: 24,
            min_word_len: 2,
            max_word_len: 4,
            min_words: 2,
            max_words: 3,
            noisy_std: 0.6,
            accent_strength: 0.6,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replicated_weight == 0 {
            return Err(Error::Config("replicated_weight must be at least 1".into()));
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return Err(Error::Config("word lengths must satisfy 1 <= min <= max".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("words per transcript must satisfy 1 <= min <= max".into()));
        }
        if self.lexicon_size == 0 {
            return Err(Error::Config("lexicon_size must be positive".into()));
        }
        Ok(())
    }

    /// How many distinct transcripts the lexicon can form.
    pub fn combinations(&self) -> u128 {
        (self.min_words..=self.max_words)
            .map(|k| (self.lexicon_size as u128).saturating_pow(k as u32))
            .fold(0u128, u128::saturating_add)
    }
}

/// The four manifests of one corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifests {
    pub train: Manifest,
    pub test_clean: Manifest,
    pub test_noisy: Manifest,
    pub test_accent: Manifest,
}

impl Manifests {
    pub fn get(&self, split: Split) -> &Manifest {
        match split {
            Split::Train => &self.train,
            Split::TestClean => &self.test_clean,
            Split::TestNoisy => &self.test_noisy,
            Split::TestAccent => &self.test_accent,
        }
    }
}

/// Pseudo-word lexicon drawn from the alphabet; words are distinct.
pub fn build_lexicon(alphabet: &[char], corpus: &CorpusSpec) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.seed ^ 0x1e41_c0de);
    let mut words: Vec<String> = Vec::with_capacity(corpus.lexicon_size);
    let mut attempts = 0;
    while words.len() < corpus.lexicon_size {
        attempts += 1;
        if attempts > 100 * corpus.lexicon_size + 1000 {
            return Err(Error::Config(format!(
                "alphabet of {} characters cannot form {} distinct words",
                alphabet.len(),
                corpus.lexicon_size
            )));
        }
        let len = rng.random_range(corpus.min_word_len..=corpus.max_word_len);
        let w: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    Ok(words)
}

/// Builds train and test manifests from disjoint transcript pools. The three
/// test sets share transcripts and differ only in acoustic condition.
pub fn build_manifests(spec: &SynthSpec, corpus: &CorpusSpec) -> Result<Manifests> {
    spec.validate()?;
    corpus.validate()?;
    let n_train = corpus.train_single + corpus.train_replicated;
    let needed = (n_train + corpus.test_size) as u128;
    // Rejection sampling needs headroom; insist on twice the demand.
    if corpus.combinations() < needed * 2 {
        return Err(Error::Config(format!(
            "a lexicon of {} words forms {} transcripts, too few for {} disjoint train/test transcripts",
            corpus.lexicon_size,
            corpus.combinations(),
            needed
        )));
    }
    let alphabet: Vec<char> = spec.alphabet.chars().collect();
    let lexicon = build_lexicon(&alphabet, corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.seed ^ 0x7a5c_2b1d);
    let mut pool: Vec<String> = Vec::with_capacity(n_train + corpus.test_size);
    let mut seen = BTreeSet::new();
    while pool.len() < n_train + corpus.test_size {
        let k = rng.random_range(corpus.min_words..=corpus.max_words);
        let t: String = (0..k).map(|_| lexicon[rng.random_range(0..lexicon.len())].as_str()).collect();
        if seen.insert(t.clone()) {
            pool.push(t);
        }
    }
    pool.shuffle(&mut rng);
    let (train_pool, test_pool) = pool.split_at(n_train);

    let train = Manifest::new(
        train_pool
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let replicated = i >= corpus.train_single;
                ManifestEntry {
                    utt_id: format!("{}-{i:05}", if replicated { "trainrep" } else { "train" }),
                    transcript: t.clone(),
                    seed: utterance_seed(corpus.seed, Split::Train.salt(), i as u64),
                    weight: if replicated { corpus.replicated_weight } else { 1 },
                    split: Split::Train,
                }
            })
            .collect(),
    )?;
    let test = |split: Split| {
        Manifest::new(
            test_pool
                .iter()
                .enumerate()
                .map(|(i, t)| ManifestEntry {
                    utt_id: format!("{}-{i:05}", split.as_str()),
                    transcript: t.clone(),
                    seed: utterance_seed(corpus.seed, split.salt(), i as u64),
                    weight: 1,
                    split,
                })
                .collect(),
        )
    };
    Ok(Manifests {
        train,
        test_clean: test(Split::TestClean)?,
        test_noisy: test(Split::TestNoisy)?,
        test_accent: test(Split::TestAccent)?,
    })
}

/// Synthesis settings for a split: noisy and accent sets perturb the clean spec.
pub fn spec_for_split(spec: &SynthSpec, corpus: &CorpusSpec, split: Split) -> SynthSpec {
    match split {
        Split::Train | Split::TestClean => spec.with_perturbation(Perturbation::None),
        Split::TestNoisy => spec.with_perturbation(Perturbation::Noise { std: corpus.noisy_std }),
        Split::TestAccent => spec.with_perturbation(Perturbation::Accent {
            strength: corpus.accent_strength,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_are_disjoint_and_weighted() {
        let m = build_manifests(&SynthSpec::default(), &CorpusSpec::default()).unwrap();
        assert_eq!(m.train.len(), 200);
        assert_eq!(m.train.total_weight(), 150 + 3 * 50);
        let train: BTreeSet<_> = m.train.entries.iter().map(|e| &e.transcript).collect();
        for split in Split::TESTS {
            let man = m.get(split);
            assert_eq!(man.len(), 40);
            assert!(man.entries.iter().all(|e| !train.contains(&e.transcript) && e.split == split));
        }
    }

    #[test]
    fn deterministic() {
        let a = build_manifests(&SynthSpec::default(), &CorpusSpec::default()).unwrap();
        let b = build_manifests(&SynthSpec::default(), &CorpusSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_lexicon_is_config_error() {
        let corpus = CorpusSpec {
            lexicon_size: 3,
            min_words: 1,
            max_words: 2,
            ..CorpusSpec::default()
        };
        assert!(matches!(
            build_manifests(&SynthSpec::default(), &corpus),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let m = build_manifests(&SynthSpec::default(), &CorpusSpec::default()).unwrap();
        assert_eq!(Manifest::parse(&m.train.to_tsv()).unwrap(), m.train);
        assert!(Manifest::parse("a\tb\t1\t0\ttrain\n").is_err());
        assert!(Manifest::parse("a\tb\t1\t1\ttrain\na\tc\t2\t1\ttrain\n").is_err());
        assert!(Manifest::parse("a\tb\t1\n").is_err());
    }

    #[test]
    fn split_specs() {
        let spec = SynthSpec::default();
        let corpus = CorpusSpec::default();
        assert_eq!(spec_for_split(&spec, &corpus, Split::TestClean).noise_std, spec.noise_std);
        assert!(matches!(
            spec_for_split(&spec, &corpus, Split::TestNoisy).perturbation,
            Perturbation::Noise { std } if std > spec.noise_std
        ));
    }
}
