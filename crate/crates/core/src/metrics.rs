//! Equal error rate and ROC AUC over utterance scores.
//!
//! Spoof is the positive class: a higher score means more spoof-like.

use std::fs;
use std::path::Path;

use crate::embedding_io::{text_lines, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub utterance_id: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        Self { entries }
    }

    /// Builds a set from bare scores with generated ids.
    pub fn from_scores(bonafide: &[f64], spoof: &[f64]) -> Self {
        let mk = |label: Label, i: usize, s: f64| ScoreEntry {
            utterance_id: format!("{label}_{i}"),
            score: s,
            label,
        };
        let entries = bonafide
            .iter()
            .enumerate()
            .map(|(i, &s)| mk(Label::Bonafide, i, s))
            .chain(spoof.iter().enumerate().map(|(i, &s)| mk(Label::Spoof, i, s)))
            .collect();
        Self { entries }
    }

    pub fn scores(&self, label: Label) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| e.score)
            .collect()
    }

    fn split_checked(&self, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let (b, s) = (self.scores(Label::Bonafide), self.scores(Label::Spoof));
        if b.is_empty() || s.is_empty() {
            return Err(Error::Contract(format!(
                "{what} needs both classes, got {} bonafide and {} spoof",
                b.len(),
                s.len()
            )));
        }
        if b.iter().chain(&s).any(|v| v.is_nan()) {
            return Err(Error::Contract(format!("{what} got a NaN score")));
        }
        Ok((b, s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    /// Fraction in [0, 1].
    pub eer: f64,
    pub threshold: f64,
}

/// Sweeps every distinct score as a threshold and interpolates linearly
/// where FAR − FRR changes sign.
///
/// At threshold `θ`, FAR is the fraction of bonafide scores `≥ θ` and FRR the
/// fraction of spoof scores `< θ`. A final sweep point just above the largest
/// score has FAR = 0 and FRR = 1.
pub fn compute_eer(scores: &ScoreSet) -> Result<Eer> {
    let (mut bona, mut spoof) = scores.split_checked("EER")?;
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let (nb, ns) = (bona.len(), spoof.len());

    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let top = *thresholds.last().unwrap();
    thresholds.push(top.next_up());

    // Walk both sorted lists once: counts of scores strictly below θ.
    let (mut bi, mut si) = (0, 0);
    let mut prev: Option<(f64, f64, f64)> = None; // (θ, FAR, FRR)
    for &th in &thresholds {
        while bi < nb && bona[bi] < th {
            bi += 1;
        }
        while si < ns && spoof[si] < th {
            si += 1;
        }
        let far = (nb - bi) as f64 / nb as f64;
        let frr = si as f64 / ns as f64;
        if far == frr {
            return Ok(Eer { eer: far, threshold: th });
        }
        if far < frr {
            let (th0, far0, frr0) = prev.expect("first sweep point has FRR = 0");
            let d0 = far0 - frr0;
            let d1 = far - frr;
            let alpha = d0 / (d0 - d1);
            return Ok(Eer {
                eer: far0 + alpha * (far - far0),
                threshold: th0 + alpha * (th - th0),
            });
        }
        prev = Some((th, far, frr));
    }
    unreachable!("the final sweep point always has FAR < FRR")
}

/// `P(spoof > bonafide) + ½·P(tie)` over all bonafide/spoof pairs, counted
/// through mid-ranks.
pub fn compute_auc(scores: &ScoreSet) -> Result<f64> {
    let (bona, spoof) = scores.split_checked("AUC")?;
    let mut all: Vec<(f64, bool)> = bona
        .iter()
        .map(|&s| (s, false))
        .chain(spoof.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_spoof = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share the mid-rank.
        let mid = (i + 1 + j) as f64 / 2.0;
        let spoof_in_tie = all[i..j].iter().filter(|e| e.1).count();
        rank_sum_spoof += mid * spoof_in_tie as f64;
        i = j;
    }
    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    let u = rank_sum_spoof - ns * (ns + 1.0) / 2.0;
    Ok(u / (nb * ns))
}

/// `EER=<percent>% AUC=<fraction>` with four decimals.
pub fn format_metric_report(eer: f64, auc: f64) -> String {
    format!("EER={:.4}% AUC={:.4}", eer * 100.0, auc)
}

pub const SCORE_HEADER: &str = "id,score,label";

pub fn format_score_file(scores: &ScoreSet) -> String {
    let mut out = format!("{SCORE_HEADER}\n");
    for e in &scores.entries {
        out.push_str(&format!("{},{},{}\n", e.utterance_id, e.score, e.label));
    }
    out
}

pub fn parse_score_file(text: &str, origin: &Path) -> Result<ScoreSet> {
    let err = |line: usize, reason: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text_lines(text).enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SCORE_HEADER => {}
        _ => return Err(err(1, format!("expected header {SCORE_HEADER:?}"))),
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, score, label] = fields[..] else {
            return Err(err(idx + 1, format!("expected 3 fields, got {}", fields.len())));
        };
        let score = score
            .parse::<f64>()
            .map_err(|e| err(idx + 1, format!("bad score {score:?}: {e}")))?;
        let label = label.parse::<Label>().map_err(|r| err(idx + 1, r))?;
        entries.push(ScoreEntry {
            utterance_id: id.to_string(),
            score,
            label,
        });
    }
    Ok(ScoreSet { entries })
}

pub fn write_score_file(path: &Path, scores: &ScoreSet) -> Result<()> {
    fs::write(path, format_score_file(scores))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_score_file(path: &Path) -> Result<ScoreSet> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_score_file(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eer_examples() {
        let e = compute_eer(&ScoreSet::from_scores(&[0.1, 0.2], &[0.8, 0.9])).unwrap();
        assert_eq!(e.eer, 0.0);
        let e = compute_eer(&ScoreSet::from_scores(&[0.2, 0.8], &[0.3, 0.9])).unwrap();
        assert_eq!(e.eer, 0.5);
        let e = compute_eer(&ScoreSet::from_scores(&[0.8, 0.9], &[0.1, 0.2])).unwrap();
        assert_eq!(e.eer, 1.0);
    }

    #[test]
    fn eer_interpolates_between_sweep_points() {
        // θ=0.1: FAR 1, FRR 0; θ=0.5: FAR 1/3, FRR 0; θ=0.6: FAR 1/3, FRR 1/2
        // crossing inside [0.5, 0.6]: d0 = 1/3, d1 = −1/6 → α = 2/3
        let s = ScoreSet::from_scores(&[0.1, 0.4, 0.7], &[0.5, 0.6]);
        let e = compute_eer(&s).unwrap();
        assert!((e.eer - 1.0 / 3.0).abs() < 1e-15, "{e:?}");
        assert!((e.threshold - (0.5 + 2.0 / 3.0 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&ScoreSet::from_scores(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 1.0);
        assert_eq!(compute_auc(&ScoreSet::from_scores(&[0.2, 0.8], &[0.3, 0.9])).unwrap(), 0.75);
        assert_eq!(compute_auc(&ScoreSet::from_scores(&[0.4, 0.4], &[0.4, 0.4, 0.4])).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_a_contract_error() {
        let s = ScoreSet::from_scores(&[0.1, 0.2], &[]);
        assert!(matches!(compute_eer(&s), Err(Error::Contract(_))));
        assert!(matches!(compute_auc(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn report_format() {
        assert_eq!(format_metric_report(0.0123456, 0.98765), "EER=1.2346% AUC=0.9877");
    }

    #[test]
    fn score_file_round_trip() {
        let s = ScoreSet::from_scores(&[0.125, 1.0 / 3.0], &[0.9]);
        let text = format_score_file(&s);
        let back = parse_score_file(&text, Path::new("s.csv")).unwrap();
        assert_eq!(back, s);
        assert_eq!(format_score_file(&back), text);
    }
}
