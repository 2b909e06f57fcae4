pub mod cer;
pub mod report;

pub use cer::{align, cer, cer_with, edit_distance, normalize, AlignmentCounts, Normalization, DEFAULT_PUNCTUATION};
pub use report::{emit_report, score_run, CerReport, RunScores, SetScore};
