//! Speech → prompt → transcript assembly, the training loss and greedy decoding.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::lm::{BOS, EOS};
use crate::nn::{ConcatOrder, Gradients, PipelineModel, Region, Session, TextRole};
use crate::parallel;

/// One utterance: speech features, prompt and (for training) transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub utt_id: String,
    /// `[T_s × d_feat]`
    pub features: Tensor,
    pub prompt: String,
    pub transcript: String,
}

/// Region layout of one regulated sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub speech: Range<usize>,
    pub prompt: Range<usize>,
    /// Leading bos marker, transcript tokens and trailing eos.
    pub transcript: Range<usize>,
    pub regions: Vec<Region>,
}

impl Layout {
    pub fn new(len_speech: usize, len_prompt: usize, len_transcript: usize, order: ConcatOrder) -> Self {
        let (speech, prompt) = match order {
            ConcatOrder::SpeechPromptTranscript => (0..len_speech, len_speech..len_speech + len_prompt),
            ConcatOrder::PromptSpeechTranscript => (len_prompt..len_prompt + len_speech, 0..len_prompt),
        };
        let start = len_speech + len_prompt;
        let transcript = start..start + len_transcript;
        let mut regions = vec![Region::Transcript; transcript.end];
        regions[speech.clone()].fill(Region::Speech);
        regions[prompt.clone()].fill(Region::Prompt);
        Self {
            speech,
            prompt,
            transcript,
            regions,
        }
    }

    pub fn len(&self) -> usize {
        self.transcript.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True at row `i` when row `i` predicts a transcript-region token after
    /// the bos marker, i.e. a transcript token or the final eos.
    pub fn loss_mask(&self) -> Vec<bool> {
        let t0 = self.transcript.start;
        (0..self.len())
            .map(|i| i >= t0 && i + 1 < self.transcript.end)
            .collect()
    }

    /// Next-token targets from the transcript-region ids (marker included);
    /// rows outside the loss mask carry `EOS` as filler.
    pub fn targets(&self, text_ids: &[usize]) -> Vec<usize> {
        let t0 = self.transcript.start;
        (0..self.len())
            .map(|i| {
                if i >= t0 && i + 1 < self.transcript.end {
                    text_ids.get(i + 1 - t0).copied().unwrap_or(EOS)
                } else {
                    EOS
                }
            })
            .collect()
    }
}

/// One concatenated utterance on a graph, ready for the LM.
#[derive(Clone, Debug)]
pub struct Regulated {
    pub input: Var,
    pub layout: Layout,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

/// Concatenates speech, prompt and `bos + transcript + eos` embeddings.
/// Targets and the loss mask cover the transcript tokens and eos.
pub fn regulate(
    model: &PipelineModel,
    s: &mut Session<'_>,
    e_speech: Var,
    e_prompt: Var,
    transcript_ids: &[usize],
) -> Result<Regulated> {
    let mut ids = Vec::with_capacity(transcript_ids.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(transcript_ids);
    ids.push(EOS);
    let e_text = model.lm.embed_ids(s, &ids)?;
    regulate_embeddings(s, e_speech, e_prompt, e_text, &ids, model.config.concat_order)
}

/// Embedding-level concatenation. `text_ids` are the ids behind `e_text`,
/// starting with the bos marker.
pub fn regulate_embeddings(
    s: &mut Session<'_>,
    e_speech: Var,
    e_prompt: Var,
    e_text: Var,
    text_ids: &[usize],
    order: ConcatOrder,
) -> Result<Regulated> {
    let (ls, ds) = s.g.shape(e_speech);
    let (lp, dp) = s.g.shape(e_prompt);
    let (lt, dt) = s.g.shape(e_text);
    if ds != dt || (lp > 0 && dp != dt) {
        return Err(Error::Shape(format!(
            "cannot concatenate embeddings of widths speech {ds}, prompt {dp}, transcript {dt}"
        )));
    }
    if lt != text_ids.len() {
        return Err(Error::Shape(format!("{lt} transcript rows for {} ids", text_ids.len())));
    }
    let layout = Layout::new(ls, lp, lt, order);
    let mut parts = match order {
        ConcatOrder::SpeechPromptTranscript => vec![e_speech, e_prompt],
        ConcatOrder::PromptSpeechTranscript => vec![e_prompt, e_speech],
    };
    parts.push(e_text);
    parts.retain(|&p| s.g.shape(p).0 > 0);
    let input = s.g.concat_rows(&parts)?;
    let targets = layout.targets(text_ids);
    let loss_mask = layout.loss_mask();
    Ok(Regulated {
        input,
        layout,
        targets,
        loss_mask,
    })
}

/// Padded view of a batch: every utterance is laid out right-padded to the
/// longest one. Each utterance runs on its own graph, so padding rows are
/// never attended.
#[derive(Clone, Debug)]
pub struct RegulatedBatch {
    pub layouts: Vec<Layout>,
    pub padded_len: usize,
}

impl RegulatedBatch {
    pub fn new(layouts: Vec<Layout>) -> Self {
        let padded_len = layouts.iter().map(Layout::len).max().unwrap_or(0);
        Self { layouts, padded_len }
    }

    pub fn padding_mask(&self, i: usize) -> Vec<bool> {
        let n = self.layouts[i].len();
        (0..self.padded_len).map(|j| j >= n).collect()
    }
}

/// Builds the regulated sequence for a sample on `s`.
pub fn regulate_sample<'p>(model: &'p PipelineModel, s: &mut Session<'p>, sample: &'p Sample) -> Result<Regulated> {
    let e_s = model.speech_embeddings(s, &sample.features)?;
    let (_, e_p) = model.lm.tokenize_embed(s, &sample.prompt, TextRole::Prompt)?;
    let t_ids = model.lm.config.tokenize(&sample.transcript, TextRole::Transcript)?;
    regulate(model, s, e_s, e_p, &t_ids)
}

/// Mean cross-entropy of a regulated sequence and the number of scored tokens.
pub fn regulated_loss(model: &PipelineModel, s: &mut Session<'_>, reg: &Regulated) -> Result<(Var, usize)> {
    let logits = model.lm.forward(s, reg.input, &reg.layout.regions)?;
    let loss = s.g.cross_entropy_masked(logits, &reg.targets, &reg.loss_mask)?;
    Ok((loss, reg.loss_mask.iter().filter(|&&m| m).count()))
}

/// Loss value, token count and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// Token-weighted mean cross-entropy over the batch.
    pub loss: f64,
    pub tokens: usize,
    pub grads: Gradients,
}

struct UttOut {
    sum_loss: f64,
    tokens: usize,
    grads: Gradients,
}

fn utterance_pass(model: &PipelineModel, sample: &Sample, with_grads: bool, weight: f64) -> Result<UttOut> {
    let mut s = Session::new(&model.store);
    let reg = regulate_sample(model, &mut s, sample)?;
    let (loss, tokens) = regulated_loss(model, &mut s, &reg)?;
    let mean = s.g.scalar_value(loss);
    let grads = if with_grads {
        // Scaled by the utterance's share of the batch's tokens.
        let scaled = s.g.scale(loss, weight * tokens as f64)?;
        s.g.backward(scaled)?;
        s.gradients()
    } else {
        Gradients::default()
    };
    Ok(UttOut {
        sum_loss: mean * tokens as f64,
        tokens,
        grads,
    })
}

fn count_tokens(model: &PipelineModel, batch: &[Sample]) -> Result<usize> {
    batch
        .iter()
        .map(|smp| {
            model
                .lm
                .config
                .tokenize(&smp.transcript, TextRole::Transcript)
                .map(|ids| ids.len() + 1)
        })
        .sum()
}

fn run_batch(model: &PipelineModel, batch: &[Sample], with_grads: bool) -> Result<BatchOutput> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let total = count_tokens(model, batch)?;
    let weight = 1.0 / total as f64;
    let outs: Vec<Result<UttOut>> = parallel::pool().install(|| {
        batch
            .par_iter()
            .map(|smp| utterance_pass(model, smp, with_grads, weight))
            .collect()
    });
    let mut grads = Gradients::new(model.store.len());
    let mut sum = 0.0;
    let mut tokens = 0;
    // Reduced in batch order.
    for o in outs {
        let o = o?;
        sum += o.sum_loss;
        tokens += o.tokens;
        grads.add(&o.grads);
    }
    Ok(BatchOutput {
        loss: sum / tokens as f64,
        tokens,
        grads,
    })
}

/// Token-weighted mean next-token loss over the transcript regions of a batch.
pub fn forward_loss(model: &PipelineModel, batch: &[Sample]) -> Result<f64> {
    run_batch(model, batch, false).map(|o| o.loss)
}

/// As [`forward_loss`], plus gradients for every currently trainable parameter.
pub fn loss_and_grads(model: &PipelineModel, batch: &[Sample]) -> Result<BatchOutput> {
    run_batch(model, batch, true)
}

/// Greedy autoregressive transcription after the speech + prompt prefix.
/// Stops at eos or after `max_len` tokens.
pub fn greedy_decode(model: &PipelineModel, features: &Tensor, prompt: &str, max_len: usize) -> Result<String> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let speech = {
        let mut s = Session::new(&model.store);
        let e = model.speech_embeddings(&mut s, features)?;
        s.g.to_tensor(e)
    };
    let prompt_ids = model.lm.config.tokenize(prompt, TextRole::Prompt)?;
    let mut out: Vec<usize> = vec![BOS];
    while out.len() <= max_len {
        let mut s = Session::new(&model.store);
        let e_s = s.g.leaf(&speech, false);
        let e_p = model.lm.embed_ids(&mut s, &prompt_ids)?;
        let e_t = model.lm.embed_ids(&mut s, &out)?;
        let reg = regulate_embeddings(&mut s, e_s, e_p, e_t, &out, model.config.concat_order)?;
        let logits = model.lm.forward(&mut s, reg.input, &reg.layout.regions)?;
        let (rows, v) = s.g.shape(logits);
        let last = &s.g.value(logits)[(rows - 1) * v..rows * v];
        // first maximum wins ties
        let next = last
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
            .0;
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(model.lm.vocab().decode(&out))
}

/// Decodes every sample in parallel, keeping input order.
pub fn decode_all(model: &PipelineModel, samples: &[Sample], max_len: usize) -> Result<Vec<(String, String)>> {
    let hyps: Vec<Result<String>> = parallel::pool().install(|| {
        samples
            .par_iter()
            .map(|smp| greedy_decode(model, &smp.features, &smp.prompt, max_len))
            .collect()
    });
    samples
        .iter()
        .zip(hyps)
        .map(|(smp, h)| h.map(|h| (smp.utt_id.clone(), h)))
        .collect()
}

/// Writes `utt_id<TAB>hypothesis` lines.
pub fn write_decodes(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (id, hyp) in rows {
        writeln!(out, "{id}\t{hyp}").expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_decodes(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_decodes(&text)
}

pub fn parse_decodes(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Data(format!("decode line {} has no tab: {l:?}", n + 1)))
        })
        .collect()
}
