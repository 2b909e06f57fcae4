use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~，。！？、；：“”‘’（）《》【】…";

/// Characters removed before scoring, besides whitespace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Normalization {
    pub punctuation: String,
    pub lowercase: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            punctuation: DEFAULT_PUNCTUATION.into(),
            lowercase: true,
        }
    }
}

impl Normalization {
    /// Strips whitespace and punctuation and folds case. Idempotent.
    pub fn apply(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        for c in text.chars() {
            if c.is_whitespace() || self.punctuation.contains(c) {
                continue;
            }
            if self.lowercase {
                out.extend(c.to_lowercase());
            } else {
                out.push(c);
            }
        }
        out
    }

    /// One-line description for report headers.
    pub fn describe(&self) -> String {
        format!(
            "whitespace and {:?} removed{}",
            self.punctuation,
            if self.lowercase { ", lowercased" } else { "" }
        )
    }
}

/// [`Normalization::apply`] with the default settings.
pub fn normalize(text: &str) -> String {
    Normalization::default().apply(text)
}

/// Edit operations of a minimal alignment against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl AlignmentCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / ref_len`; errors when the reference is empty.
    pub fn cer(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::Scoring("CER is undefined for an empty reference".into()));
        }
        Ok(self.errors() as f64 / self.ref_len as f64)
    }
}

impl Add for AlignmentCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl AddAssign for AlignmentCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for AlignmentCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Unit-cost Levenshtein distance in `O(min(|a|, |b|))` memory.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0; short.len() + 1];
    for (i, x) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Minimal alignment counts of `hyp` against `reference`. On ties the
/// traceback prefers substitution, then insertion, then deletion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> AlignmentCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut counts = AlignmentCounts {
        ref_len: n,
        ..AlignmentCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = reference[i - 1] != hyp[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(mismatch) {
                counts.substitutions += usize::from(mismatch);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == d[i * w + j - 1] + 1 {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

/// Character error rate of `hyp` against `reference` after normalizing both.
pub fn cer_with(norm: &Normalization, reference: &str, hyp: &str) -> Result<(AlignmentCounts, f64)> {
    let r: Vec<char> = norm.apply(reference).chars().collect();
    let h: Vec<char> = norm.apply(hyp).chars().collect();
    if r.is_empty() {
        return Err(Error::Scoring(format!(
            "CER is undefined: reference {reference:?} is empty after normalization"
        )));
    }
    let counts = align(&r, &h);
    let value = counts.cer()?;
    Ok((counts, value))
}

/// [`cer_with`] under the default normalization.
pub fn cer(reference: &str, hyp: &str) -> Result<(AlignmentCounts, f64)> {
    cer_with(&Normalization::default(), reference, hyp)
}
