use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::cer::{cer_with, AlignmentCounts, Normalization};
use crate::data::Manifest;
use crate::error::{Error, Result};

/// Counts of one test set, in total and per utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SetScore {
    pub counts: AlignmentCounts,
    pub per_utt: Vec<(String, AlignmentCounts)>,
}

impl SetScore {
    /// Micro-averaged CER: total errors over total reference length.
    pub fn cer(&self) -> Result<f64> {
        self.counts.cer()
    }
}

/// Scores `utt_id → hypothesis` rows against a manifest. Every manifest
/// utterance needs a hypothesis; hypotheses for unknown ids are ignored with
/// a warning.
pub fn score_run(decodes: &[(String, String)], manifest: &Manifest, norm: &Normalization) -> Result<SetScore> {
    let mut hyps: BTreeMap<&str, &str> = BTreeMap::new();
    for (id, h) in decodes {
        if hyps.insert(id, h).is_some() {
            return Err(Error::Scoring(format!("utterance `{id}` decoded twice")));
        }
    }
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .map(|e| e.utt_id.as_str())
        .filter(|id| !hyps.contains_key(id))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).copied().collect();
        return Err(Error::Scoring(format!(
            "{} manifest utterances have no hypothesis: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    let known: BTreeSet<&str> = manifest.entries.iter().map(|e| e.utt_id.as_str()).collect();
    let extra = hyps.keys().filter(|id| !known.contains(*id)).count();
    if extra > 0 {
        log::warn!("{extra} hypotheses have no manifest entry and are ignored");
    }
    let mut per_utt = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let (counts, _) = cer_with(norm, &e.transcript, hyps[e.utt_id.as_str()])?;
        per_utt.push((e.utt_id.clone(), counts));
    }
    Ok(SetScore {
        counts: per_utt.iter().map(|(_, c)| *c).sum(),
        per_utt,
    })
}

/// Scores of one system on every test set, in a fixed set order.
#[derive(Clone, Debug, PartialEq)]
pub struct RunScores {
    pub label: String,
    pub sets: IndexMap<String, AlignmentCounts>,
}

impl RunScores {
    pub fn total(&self) -> AlignmentCounts {
        self.sets.values().copied().sum()
    }

    /// `counts.tsv`: one line per test set with the raw counts and CER.
    pub fn counts_tsv(&self) -> String {
        let mut out = String::from("test_set\tsubstitutions\tinsertions\tdeletions\tref_len\tcer\n");
        for (set, c) in &self.sets {
            let cer = c.cer().map_or(f64::NAN, |v| v);
            writeln!(
                out,
                "{set}\t{}\t{}\t{}\t{}\t{cer}",
                c.substitutions, c.insertions, c.deletions, c.ref_len
            )
            .expect("string write");
        }
        out
    }

    pub fn parse_counts_tsv(label: &str, text: &str) -> Result<Self> {
        let mut sets = IndexMap::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Report(format!("counts line {}: {line:?}", n + 1));
            if cols.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| cols[i].parse::<usize>().map_err(|_| bad());
            sets.insert(
                cols[0].to_string(),
                AlignmentCounts {
                    substitutions: num(1)?,
                    insertions: num(2)?,
                    deletions: num(3)?,
                    ref_len: num(4)?,
                },
            );
        }
        Ok(Self {
            label: label.to_string(),
            sets,
        })
    }
}

/// Test sets × systems table of CER%.
#[derive(Clone, Debug, PartialEq)]
pub struct CerReport {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    /// `cells[row][column]`, CER in percent.
    pub cells: Vec<Vec<f64>>,
}

impl CerReport {
    /// Builds the table; every run must cover the same test sets in the same order.
    pub fn from_runs(title: &str, runs: &[RunScores]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Report("a report needs at least one run".into()))?;
        let rows: Vec<String> = first.sets.keys().cloned().collect();
        let mut labels = BTreeSet::new();
        for r in runs {
            if !labels.insert(r.label.as_str()) {
                return Err(Error::Report(format!("duplicate column label `{}`", r.label)));
            }
            let sets: Vec<&String> = r.sets.keys().collect();
            if sets != rows.iter().collect::<Vec<_>>() {
                return Err(Error::Report(format!(
                    "run `{}` covers test sets {sets:?}, expected {rows:?}",
                    r.label
                )));
            }
        }
        let cells = rows
            .iter()
            .map(|set| runs.iter().map(|r| r.sets[set].cer().map(|v| 100.0 * v)).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self {
            title: title.to_string(),
            columns: runs.iter().map(|r| r.label.clone()).collect(),
            rows,
            cells,
        })
    }

    /// Columns holding the lowest value of each row; ties all count.
    pub fn best_in_row(&self, row: usize) -> Vec<usize> {
        let min = self.cells[row].iter().copied().fold(f64::INFINITY, f64::min);
        (0..self.columns.len()).filter(|&c| self.cells[row][c] == min).collect()
    }

    /// Markdown table, best value per row in bold, normalization noted under the title.
    pub fn to_markdown(&self, norm: &Normalization) -> String {
        let mut out = format!("## {}\n\nCER% (lower is better); normalization: {}.\n\n", self.title, norm.describe());
        out.push_str("| test set |");
        for c in &self.columns {
            write!(out, " {c} |").expect("string write");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.columns.len()));
        out.push('\n');
        for (r, name) in self.rows.iter().enumerate() {
            let best = self.best_in_row(r);
            write!(out, "| {name} |").expect("string write");
            for (c, v) in self.cells[r].iter().enumerate() {
                if best.contains(&c) {
                    write!(out, " **{v:.2}** |").expect("string write");
                } else {
                    write!(out, " {v:.2} |").expect("string write");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Tab-separated table; values use the shortest exact representation.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("test_set");
        for c in &self.columns {
            write!(out, "\t{c}").expect("string write");
        }
        out.push('\n');
        for (name, row) in self.rows.iter().zip(&self.cells) {
            out.push_str(name);
            for v in row {
                write!(out, "\t{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(title: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::Report("empty report".into()))?;
        let mut head = header.split('\t');
        if head.next() != Some("test_set") {
            return Err(Error::Report("report header must start with `test_set`".into()));
        }
        let columns: Vec<String> = head.map(str::to_string).collect();
        let (mut rows, mut cells) = (Vec::new(), Vec::new());
        for line in lines {
            let mut parts = line.split('\t');
            rows.push(parts.next().unwrap_or_default().to_string());
            let row = parts
                .map(|v| v.parse::<f64>().map_err(|_| Error::Report(format!("bad cell {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != columns.len() {
                return Err(Error::Report(format!("row {line:?} has {} cells", row.len())));
            }
            cells.push(row);
        }
        Ok(Self {
            title: title.to_string(),
            columns,
            rows,
            cells,
        })
    }
}

/// Writes `report.md` and `report.tsv` for the runs into `dir`.
pub fn emit_report(dir: &Path, title: &str, runs: &[RunScores], norm: &Normalization) -> Result<CerReport> {
    let report = CerReport::from_runs(title, runs)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let md = dir.join("report.md");
    fs::write(&md, report.to_markdown(norm)).map_err(|e| Error::io(&md, e))?;
    let tsv = dir.join("report.tsv");
    fs::write(&tsv, report.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ManifestEntry, Split};

    fn manifest(rows: &[(&str, &str)]) -> Manifest {
        Manifest::new(
            rows.iter()
                .map(|(id, t)| ManifestEntry {
                    utt_id: id.to_string(),
                    transcript: t.to_string(),
                    seed: 0,
                    weight: 1,
                    split: Split::TestClean,
                })
                .collect(),
        )
        .unwrap()
    }

    fn decodes(rows: &[(&str, &str)]) -> Vec<(String, String)> {
        rows.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn micro_average_example() {
        let m = manifest(&[("u1", "a"), ("u2", "abc")]);
        let s = score_run(&decodes(&[("u1", "a"), ("u2", "")]), &m, &Normalization::default()).unwrap();
        assert_eq!(s.cer().unwrap(), 0.75);
        let sum: AlignmentCounts = s.per_utt.iter().map(|(_, c)| *c).sum();
        assert_eq!(sum, s.counts);
    }

    #[test]
    fn coverage_errors() {
        let m = manifest(&[("u1", "a")]);
        assert!(matches!(score_run(&[], &m, &Normalization::default()), Err(Error::Scoring(_))));
        assert!(score_run(&decodes(&[("u1", "a"), ("zz", "b")]), &m, &Normalization::default()).is_ok());
    }

    fn run(label: &str, errs: &[usize]) -> RunScores {
        RunScores {
            label: label.into(),
            sets: errs
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    (
                        format!("set{i}"),
                        AlignmentCounts {
                            substitutions: e,
                            ref_len: 7,
                            ..AlignmentCounts::default()
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn report_layout_and_round_trip() {
        let single = CerReport::from_runs("t", &[run("a", &[1, 2])]).unwrap();
        assert_eq!(single.columns.len(), 1);
        let r = CerReport::from_runs("t", &[run("a", &[1, 2]), run("b", &[3, 4])]).unwrap();
        assert!((0..2).all(|row| r.best_in_row(row) == vec![0]));
        assert_eq!(r.to_markdown(&Normalization::default()).matches("**").count(), 4);
        assert_eq!(CerReport::from_tsv("t", &r.to_tsv()).unwrap(), r);
        assert!(CerReport::from_runs("t", &[run("a", &[1, 2]), run("b", &[3])]).is_err());
    }

    #[test]
    fn counts_round_trip() {
        let r = run("a", &[1, 2]);
        assert_eq!(RunScores::parse_counts_tsv("a", &r.counts_tsv()).unwrap(), r);
    }
}
