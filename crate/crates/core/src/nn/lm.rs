use serde::{Deserialize, Serialize};

use super::layers::{sinusoid_table, LayerNorm, Linear, SelfAttentionBlock};
use super::lora::LoraConfig;
use super::params::{Group, Init, ParamId, ParamStore, Session};
use crate::autodiff::{causal_mask, Var};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const N_SPECIALS: usize = 3;

pub const DEFAULT_CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 ";

/// Character vocabulary: ids 0..3 are pad, bos, eos; characters follow in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Vocab {
    chars: Vec<char>,
}

impl TryFrom<String> for Vocab {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Vocab::new(&s)
    }
}

impl From<Vocab> for String {
    fn from(v: Vocab) -> String {
        v.chars.into_iter().collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(DEFAULT_CHARS).expect("default vocabulary is valid")
    }
}

impl Vocab {
    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::Config(format!("vocabulary lists {c:?} twice")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(Self { chars })
    }

    pub fn len(&self) -> usize {
        self.chars.len() + N_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + N_SPECIALS)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(N_SPECIALS).and_then(|i| self.chars.get(i).copied())
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIALS
    }

    /// Character-level tokenization; fails listing every out-of-vocabulary character.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut bad = Vec::new();
        let ids: Vec<usize> = text
            .chars()
            .filter_map(|c| {
                let id = self.id(c);
                if id.is_none() && !bad.contains(&c) {
                    bad.push(c);
                }
                id
            })
            .collect();
        if bad.is_empty() {
            Ok(ids)
        } else {
            Err(Error::Tokenizer(bad))
        }
    }

    /// Drops specials and maps ids back to characters.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char_of(i)).collect()
    }
}

/// Wrapper placed around the prompt, in the manner of a chat model's turn markers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatTemplate {
    pub prefix: String,
    pub suffix: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextRole {
    Prompt,
    Transcript,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderLmConfig {
    pub vocab: Vocab,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Longest region (speech, prompt or transcript) the position table covers.
    pub max_positions: usize,
    pub chat_template: Option<ChatTemplate>,
}

impl Default for DecoderLmConfig {
    fn default() -> Self {
        Self {
            vocab: Vocab::default(),
            embed_dim: 48,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_positions: 64,
            chat_template: None,
        }
    }
}

impl DecoderLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "LM embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if let Some(t) = &self.chat_template {
            self.vocab.encode(&t.prefix)?;
            self.vocab.encode(&t.suffix)?;
        }
        Ok(())
    }

    /// Number of tokens the chat template adds around a prompt.
    pub fn template_len(&self) -> usize {
        self.chat_template
            .as_ref()
            .map_or(0, |t| 1 + t.prefix.chars().count() + t.suffix.chars().count())
    }

    /// Token ids for `text`; prompts are wrapped in the chat template when one is set.
    pub fn tokenize(&self, text: &str, role: TextRole) -> Result<Vec<usize>> {
        let body = self.vocab.encode(text)?;
        match (&self.chat_template, role) {
            (Some(t), TextRole::Prompt) => {
                let mut ids = vec![BOS];
                ids.extend(self.vocab.encode(&t.prefix)?);
                ids.extend(body);
                ids.extend(self.vocab.encode(&t.suffix)?);
                Ok(ids)
            }
            _ => Ok(body),
        }
    }
}

/// Segment of the regulated input sequence. Positions restart in every region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Speech,
    Prompt,
    Transcript,
}

impl Region {
    pub fn index(self) -> usize {
        match self {
            Region::Speech => 0,
            Region::Prompt => 1,
            Region::Transcript => 2,
        }
    }
}

/// Decoder-only character LM: token embedding, per-region position and
/// region-type embeddings, causal pre-norm blocks, final norm, output head.
#[derive(Clone, Debug)]
pub struct DecoderLm {
    pub config: DecoderLmConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub region_emb: ParamId,
    pub blocks: Vec<SelfAttentionBlock>,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

impl DecoderLm {
    pub fn new(store: &mut ParamStore, config: &DecoderLmConfig, lora: Option<&LoraConfig>) -> Result<Self> {
        config.validate()?;
        let g = Group::LmBody;
        let d = config.embed_dim;
        let tok_emb = store.add("lm.tok_emb", g, false, &[config.vocab.len(), d], Init::Normal(1.0))?;
        let pos_emb = store.add("lm.pos_emb", g, false, &[config.max_positions, d], Init::Zeros)?;
        store
            .tensor_mut(pos_emb)
            .data_mut()
            .copy_from_slice(&sinusoid_table(config.max_positions, d));
        let region_emb = store.add("lm.region_emb", g, false, &[3, d], Init::Normal(0.5))?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let name = format!("lm.block{i}");
            let mut b = SelfAttentionBlock::new(store, &name, d, config.n_heads, config.ffn_mult * d, g)?;
            if let Some(cfg) = lora {
                b.attn.attach_lora(store, &format!("{name}.attn"), cfg)?;
            }
            blocks.push(b);
        }
        let ln_out = LayerNorm::new(store, "lm.ln_out", d, g)?;
        let head = Linear::with_init(store, "lm.head", d, config.vocab.len(), false, g, Init::Normal(0.02))?;
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            region_emb,
            blocks,
            ln_out,
            head,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    pub fn embed_ids(&self, s: &mut Session<'_>, ids: &[usize]) -> Result<Var> {
        let table = s.p(self.tok_emb);
        s.g.embedding(table, ids)
    }

    /// Tokenizes and embeds; returns `(ids, [L × embed_dim])`.
    pub fn tokenize_embed(&self, s: &mut Session<'_>, text: &str, role: TextRole) -> Result<(Vec<usize>, Var)> {
        let ids = self.config.tokenize(text, role)?;
        let e = self.embed_ids(s, &ids)?;
        Ok((ids, e))
    }

    /// Logits `[L × V]` for an input embedding sequence laid out by `regions`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, regions: &[Region]) -> Result<Var> {
        let (l, d) = s.g.shape(x);
        if d != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "LM input width {d} differs from embed_dim {}",
                self.config.embed_dim
            )));
        }
        if regions.len() != l {
            return Err(Error::Shape(format!("{} region tags for {l} rows", regions.len())));
        }
        let mut offsets = Vec::with_capacity(l);
        let mut counters = [0usize; 3];
        for r in regions {
            let c = &mut counters[r.index()];
            offsets.push(*c);
            *c += 1;
        }
        if let Some(&too_far) = offsets.iter().find(|&&o| o >= self.config.max_positions) {
            return Err(Error::Config(format!(
                "region offset {too_far} exceeds the LM position table of {}",
                self.config.max_positions
            )));
        }
        let pos_table = s.p(self.pos_emb);
        let pos = s.g.embedding(pos_table, &offsets)?;
        let region_table = s.p(self.region_emb);
        let region_ids: Vec<usize> = regions.iter().map(|r| r.index()).collect();
        let reg = s.g.embedding(region_table, &region_ids)?;
        let h = s.g.add(x, pos)?;
        let mut h = s.g.add(h, reg)?;
        let mask = causal_mask(l);
        for b in &self.blocks {
            h = b.forward(s, h, Some(&mask))?;
        }
        let h = self.ln_out.forward(s, h)?;
        self.head.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_layout() {
        let v = Vocab::default();
        assert_eq!(v.len(), 40);
        assert_eq!(v.id('a'), Some(3));
        assert_eq!(v.char_of(3), Some('a'));
        assert_eq!(v.decode(&[BOS, 3, EOS, 4, PAD]), "ab");
    }

    #[test]
    fn duplicate_chars_rejected() {
        assert!(Vocab::new("abca").is_err());
    }

    #[test]
    fn oov_lists_offending_chars() {
        let v = Vocab::default();
        match v.encode("aXbX?") {
            Err(Error::Tokenizer(bad)) => assert_eq!(bad, vec!['X', '?']),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tokenize_lengths() {
        let mut cfg = DecoderLmConfig::default();
        assert!(cfg.tokenize("", TextRole::Prompt).unwrap().is_empty());
        assert_eq!(cfg.tokenize("hello", TextRole::Prompt).unwrap().len(), 5);
        cfg.chat_template = Some(ChatTemplate {
            prefix: "user ".into(),
            suffix: " bot".into(),
        });
        assert_eq!(cfg.template_len(), 1 + 5 + 4);
        let wrapped = cfg.tokenize("hello", TextRole::Prompt).unwrap();
        assert_eq!(wrapped.len() - 5, cfg.template_len());
        // transcripts are never wrapped
        assert_eq!(cfg.tokenize("hello", TextRole::Transcript).unwrap().len(), 5);
    }
}
