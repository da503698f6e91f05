//! Direction and cosine statistics of frame-to-frame embedding motion.
//!
//! For consecutive frames the unit direction `Δx_t = (x_{t+1} − x_t) / ‖·‖`
//! is taken, then the cosine between consecutive directions. Smooth,
//! persistent trajectories give cosines near one with little spread.

use rayon::prelude::*;

use crate::embedding_io::{Label, Manifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_NORM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub directions: Vec<Vec<f64>>,
    /// Consecutive pairs whose difference norm was at or below epsilon.
    pub skips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionStats {
    pub directions: Vec<Vec<f64>>,
    pub cosines: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub raw_diff_mean: f64,
    pub skips: usize,
}

fn frame_count(f: &Tensor) -> Result<usize> {
    if f.rank() != 2 || f.shape()[0] < 2 {
        return Err(Error::Input(format!(
            "temporal analysis needs a T×D matrix with T >= 2, got {:?}",
            f.shape()
        )));
    }
    Ok(f.shape()[0])
}

/// Grand mean of `F[t+1] − F[t]` over all steps and dimensions.
pub fn raw_difference_mean(f: &Tensor) -> Result<f64> {
    let t = frame_count(f)?;
    let d = f.shape()[1];
    // The sum telescopes to last − first per dimension.
    let total: f64 = f.row(t - 1).iter().zip(f.row(0)).map(|(a, b)| a - b).sum();
    Ok(total / ((t - 1) * d) as f64)
}

pub fn direction_vectors(f: &Tensor, norm_epsilon: f64) -> Result<DirectionSet> {
    let t = frame_count(f)?;
    let mut directions = Vec::with_capacity(t - 1);
    let mut skips = 0;
    for i in 0..t - 1 {
        let diff: Vec<f64> = f.row(i + 1).iter().zip(f.row(i)).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= norm_epsilon {
            skips += 1;
            continue;
        }
        directions.push(diff.into_iter().map(|v| v / norm).collect());
    }
    Ok(DirectionSet { directions, skips })
}

/// Cosines between consecutive unit directions.
pub fn cosine_series(directions: &[Vec<f64>]) -> Result<Vec<f64>> {
    if directions.len() < 2 {
        return Err(Error::Input(format!(
            "cosine series needs at least 2 directions, got {}",
            directions.len()
        )));
    }
    Ok(directions
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum())
        .collect())
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn utterance_stats_with(f: &Tensor, norm_epsilon: f64) -> Result<DirectionStats> {
    let raw_diff_mean = raw_difference_mean(f)?;
    let DirectionSet { directions, skips } = direction_vectors(f, norm_epsilon)?;
    let cosines = cosine_series(&directions)?;
    let (mu, sigma) = mean_and_population_std(&cosines);
    Ok(DirectionStats {
        directions,
        cosines,
        mu,
        sigma,
        raw_diff_mean,
        skips,
    })
}

/// Per-utterance μ (mean cosine), σ (population std of cosines) and the raw
/// difference mean.
pub fn utterance_stats(f: &Tensor) -> Result<DirectionStats> {
    utterance_stats_with(f, DEFAULT_NORM_EPSILON)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceAnalysis {
    pub id: String,
    pub label: Label,
    pub mu: f64,
    pub sigma: f64,
    pub raw_diff_mean: f64,
    pub skips: usize,
}

impl UtteranceAnalysis {
    pub fn from_stats(id: impl Into<String>, label: Label, stats: &DirectionStats) -> Self {
        Self {
            id: id.into(),
            label,
            mu: stats.mu,
            sigma: stats.sigma,
            raw_diff_mean: stats.raw_diff_mean,
            skips: stats.skips,
        }
    }
}

/// Analyzes every utterance of a manifest; rows keep manifest order.
pub fn analyze_manifest(manifest: &Manifest) -> Result<Vec<UtteranceAnalysis>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let seq = manifest.load(r)?;
            let stats = utterance_stats(seq.frames()).map_err(|e| {
                Error::Input(format!("utterance {}: {e}", r.utterance_id))
            })?;
            Ok(UtteranceAnalysis::from_stats(&r.utterance_id, r.label, &stats))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distribution {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub count: usize,
    pub mu: Distribution,
    pub sigma: Distribution,
    pub raw_diff_mean: Distribution,
}

/// Per-class distribution summary. A class with no utterances is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSummary {
    pub bonafide: Option<ClassStats>,
    pub spoof: Option<ClassStats>,
}

pub fn class_summary(rows: &[UtteranceAnalysis]) -> ClassSummary {
    let summarize = |label: Label| {
        let sel: Vec<&UtteranceAnalysis> = rows.iter().filter(|r| r.label == label).collect();
        let col = |f: fn(&UtteranceAnalysis) -> f64| sel.iter().map(|r| f(r)).collect::<Vec<_>>();
        Some(ClassStats {
            count: sel.len(),
            mu: Distribution::of(&col(|r| r.mu))?,
            sigma: Distribution::of(&col(|r| r.sigma))?,
            raw_diff_mean: Distribution::of(&col(|r| r.raw_diff_mean))?,
        })
    };
    ClassSummary {
        bonafide: summarize(Label::Bonafide),
        spoof: summarize(Label::Spoof),
    }
}

pub const REPORT_HEADER: &str = "id,label,mu,sigma,raw_diff_mean,skips";

/// Renders per-utterance rows followed by `#`-prefixed summary lines.
pub fn format_report(rows: &[UtteranceAnalysis], summary: &ClassSummary) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id, r.label, r.mu, r.sigma, r.raw_diff_mean, r.skips
        ));
    }
    out.push_str("# class,stat,count,mean,min,q1,median,q3,max\n");
    for (label, stats) in [(Label::Bonafide, &summary.bonafide), (Label::Spoof, &summary.spoof)] {
        match stats {
            None => out.push_str(&format!("# {label},absent\n")),
            Some(s) => {
                for (name, d) in [("mu", s.mu), ("sigma", s.sigma), ("raw_diff_mean", s.raw_diff_mean)] {
                    out.push_str(&format!(
                        "# {label},{name},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                        s.count, d.mean, d.min, d.q1, d.median, d.q3, d.max
                    ));
                }
            }
        }
    }
    out
}
