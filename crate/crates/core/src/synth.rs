//! Synthetic embedding trajectories whose classes differ in directional
//! persistence, plus partial splices with ground-truth annotations.
//!
//! A trajectory is the running sum of a first-order momentum walk
//!
//! ```text
//! step[0] ~ N(0, s²/D · I)
//! step[t] = p·step[t−1] − κ·(x[t] − x[0]) + n·s/√D · √(1 − p²) · N(0, I)
//! x[t+1]  = x[t] + step[t]
//! ```
//!
//! The `√(1 − p²)` factor keeps the stationary step size near `n·s` for
//! every `p`, so the classes differ in direction statistics and not in speed.
//! The restoring term `κ` keeps a trajectory within a few steps of where it
//! started instead of drifting without bound; with `κ = 0` the walk is a
//! plain running sum.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::embedding_io::{
    text_lines, write_embedding_file, write_manifest, FrameEmbeddingSequence, Label, ManifestRecord,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dim: usize,
    /// Inclusive range of utterance lengths in frames.
    pub t_range: (usize, usize),
    pub persistence_bonafide: f64,
    pub persistence_spoof: f64,
    /// Multiplier on the stationary step size.
    pub noise_scale: f64,
    /// Expected norm of one step.
    pub step_scale: f64,
    /// Pull of each step back toward the starting point; 0 gives an
    /// unbounded walk.
    pub restoring: f64,
    /// Range of the spliced share of a spoof utterance.
    pub splice_fraction: (f64, f64),
    /// Frames blended linearly at each splice edge.
    pub crossfade: usize,
    pub bonafide_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            t_range: (200, 400),
            persistence_bonafide: 0.9,
            persistence_spoof: -0.5,
            noise_scale: 1.0,
            step_scale: 10.0,
            restoring: 0.1,
            splice_fraction: (0.3, 0.7),
            crossfade: 2,
            bonafide_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        let (lo, hi) = self.t_range;
        if lo < 3 || lo > hi {
            return bad(format!("t_range must satisfy 3 <= min <= max, got {lo}..={hi}"));
        }
        if self.persistence_bonafide <= self.persistence_spoof {
            return bad("bonafide persistence must exceed spoof persistence".into());
        }
        for p in [self.persistence_bonafide, self.persistence_spoof] {
            if !(-1.0..=1.0).contains(&p) {
                return bad(format!("persistence {p} outside [-1, 1]"));
            }
        }
        let (a, b) = self.splice_fraction;
        if !(a > 0.0 && b < 1.0 && a <= b) {
            return bad(format!("splice fractions must lie in (0, 1), got {a}..{b}"));
        }
        if !(self.noise_scale >= 0.0 && self.step_scale > 0.0 && (0.0..1.0).contains(&self.restoring)) {
            return bad("need noise_scale >= 0, step_scale > 0 and 0 <= restoring < 1".into());
        }
        if !(0.0..=1.0).contains(&self.bonafide_fraction) {
            return bad(format!("bonafide_fraction {} outside [0, 1]", self.bonafide_fraction));
        }
        Ok(())
    }

    pub fn persistence(&self, label: Label) -> f64 {
        match label {
            Label::Bonafide => self.persistence_bonafide,
            Label::Spoof => self.persistence_spoof,
        }
    }
}

/// Momentum walk of `t` frames with persistence `p`, starting at `origin`
/// and pulled toward `center` with the configured restoring strength.
pub fn momentum_walk<R: Rng + ?Sized>(
    t: usize,
    p: f64,
    config: &SynthConfig,
    origin: &[f64],
    center: &[f64],
    rng: &mut R,
) -> Tensor {
    let dim = config.dim;
    let per_dim = config.step_scale / (dim as f64).sqrt();
    let innovation = config.noise_scale * per_dim * (1.0 - p * p).max(0.0).sqrt();
    let k = config.restoring;
    let mut step: Vec<f64> = (0..dim).map(|_| per_dim * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut data = Vec::with_capacity(t * dim);
    data.extend_from_slice(origin);
    for i in 1..t {
        let prev = (i - 1) * dim;
        if i > 1 {
            for (d, s) in step.iter_mut().enumerate() {
                let pull = k * (data[prev + d] - center[d]);
                *s = p * *s - pull + innovation * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for d in 0..dim {
            let v = data[prev + d] + step[d];
            data.push(v);
        }
    }
    Tensor::new(&[t, dim], data).expect("walk shape")
}

/// One trajectory of class `label`, fully determined by `seed`.
pub fn gen_trajectory(t: usize, config: &SynthConfig, label: Label, seed: u64) -> Result<FrameEmbeddingSequence> {
    if t < 3 {
        return Err(Error::Contract(format!("trajectory needs T >= 3, got {t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = trajectory_from(&mut rng, t, config, label);
    FrameEmbeddingSequence::new(format!("{label}_{seed}"), frames)
}

fn trajectory_from<R: Rng + ?Sized>(rng: &mut R, t: usize, config: &SynthConfig, label: Label) -> Tensor {
    let per_dim = config.step_scale / (config.dim as f64).sqrt();
    let origin: Vec<f64> = (0..config.dim).map(|_| per_dim * rng.sample::<f64, _>(StandardNormal)).collect();
    momentum_walk(t, config.persistence(label), config, &origin, &origin, rng)
}

/// Spliced frame intervals of one utterance, end-exclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpliceAnnotation {
    pub utterance_id: String,
    pub intervals: Vec<(usize, usize)>,
}

impl SpliceAnnotation {
    /// Intervals must be non-empty, sorted, disjoint and inside `[0, t)`.
    pub fn validate(&self, t: usize) -> Result<()> {
        let mut prev_end = 0;
        for (i, &(s, e)) in self.intervals.iter().enumerate() {
            if s >= e || e > t || (i > 0 && s < prev_end) {
                return Err(Error::Validation(format!(
                    "{}: bad interval [{s}, {e}) for T={t}",
                    self.utterance_id
                )));
            }
            prev_end = e;
        }
        Ok(())
    }

    /// Per-frame membership flags of length `t`.
    pub fn frame_flags(&self, t: usize) -> Vec<bool> {
        let mut flags = vec![false; t];
        for &(s, e) in &self.intervals {
            flags[s.min(t)..e.min(t)].iter_mut().for_each(|f| *f = true);
        }
        flags
    }
}

/// Replaces frames `[start, start + length)` of `bonafide` with `spoof`.
///
/// With `crossfade = c`, the `c` outermost frames at each edge of the
/// interval blend linearly from the bonafide source toward the spoof one.
/// Frames outside the interval are always the bonafide frames.
pub fn splice_partial(
    bonafide: &FrameEmbeddingSequence,
    spoof: &FrameEmbeddingSequence,
    start: usize,
    length: usize,
    crossfade: usize,
) -> Result<(FrameEmbeddingSequence, SpliceAnnotation)> {
    let end = start + length;
    if end > bonafide.len() || end > spoof.len() {
        return Err(Error::Contract(format!(
            "splice [{start}, {end}) exceeds inputs of length {} and {}",
            bonafide.len(),
            spoof.len()
        )));
    }
    if bonafide.width() != spoof.width() {
        return Err(Error::dim("splice_partial", &[bonafide.width()], &[spoof.width()]));
    }
    let mut out = bonafide.frames().clone();
    let d = bonafide.width();
    for i in start..end {
        let from_edge = (i - start).min(end - 1 - i);
        let w = if from_edge < crossfade {
            (from_edge + 1) as f64 / (crossfade + 1) as f64
        } else {
            1.0
        };
        let src = spoof.frames().row(i);
        let dst = &mut out.data_mut()[i * d..(i + 1) * d];
        for (o, s) in dst.iter_mut().zip(src) {
            *o = if w == 1.0 { *s } else { (1.0 - w) * *o + w * s };
        }
    }
    let id = bonafide.utterance_id.clone();
    let intervals = if length == 0 { vec![] } else { vec![(start, end)] };
    let annotation = SpliceAnnotation {
        utterance_id: id.clone(),
        intervals,
    };
    Ok((FrameEmbeddingSequence::new(id, out)?, annotation))
}

pub const ANNOTATION_HEADER: &str = "id,start_frame,end_frame";

pub fn format_annotations(annotations: &[SpliceAnnotation]) -> String {
    let mut s = format!("{ANNOTATION_HEADER}\n");
    for a in annotations {
        for (start, end) in &a.intervals {
            let _ = writeln!(s, "{},{start},{end}", a.utterance_id);
        }
    }
    s
}

/// Groups consecutive lines of the same id into one annotation.
pub fn parse_annotations(text: &str, origin: &Path) -> Result<Vec<SpliceAnnotation>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text_lines(text).enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ANNOTATION_HEADER => {}
        _ => return Err(err(1, format!("expected header {ANNOTATION_HEADER:?}"))),
    }
    let mut out: Vec<SpliceAnnotation> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, s, e] = f[..] else {
            return Err(err(i + 1, format!("expected 3 fields, got {}", f.len())));
        };
        let num = |v: &str| v.parse::<usize>().map_err(|x| err(i + 1, format!("{v:?}: {x}")));
        let (s, e) = (num(s)?, num(e)?);
        if s >= e {
            return Err(err(i + 1, format!("empty interval [{s}, {e})")));
        }
        match out.last_mut() {
            Some(a) if a.utterance_id == id => a.intervals.push((s, e)),
            _ => out.push(SpliceAnnotation {
                utterance_id: id.to_string(),
                intervals: vec![(s, e)],
            }),
        }
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[SpliceAnnotation]) -> Result<()> {
    fs::write(path, format_annotations(annotations))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<SpliceAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_annotations(&text, path)
}

/// Utterances per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub eval: usize,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "eval"];

/// A generated labeled utterance.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub sequence: FrameEmbeddingSequence,
    pub label: Label,
    pub annotation: Option<SpliceAnnotation>,
}

/// Generates utterance `index` of split `split` (0 train, 1 val, 2 eval).
/// Each utterance draws from its own ChaCha stream, so splits and
/// utterances never share random numbers.
pub fn gen_utterance(config: &SynthConfig, split: usize, index: usize, label: Label) -> Result<SynthUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(((split as u64 + 1) << 32) | index as u64);
    let id = format!("{}_{index:05}", SPLIT_NAMES[split]);
    let t = rng.random_range(config.t_range.0..=config.t_range.1);
    let bona = FrameEmbeddingSequence::new(id.clone(), trajectory_from(&mut rng, t, config, Label::Bonafide))?;
    if label == Label::Bonafide {
        return Ok(SynthUtterance {
            sequence: bona,
            label,
            annotation: None,
        });
    }
    let (lo, hi) = config.splice_fraction;
    let frac = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let length = ((frac * t as f64).round() as usize).clamp(1, t - 1);
    let start = rng.random_range(0..=t - length);
    // The spoof walk starts where the bonafide one is at the splice point.
    let origin = bona.frames().row(start).to_vec();
    let center = bona.frames().row(0).to_vec();
    let walk = momentum_walk(length, config.persistence_spoof, config, &origin, &center, &mut rng);
    let mut full = bona.frames().clone();
    full.data_mut()[start * config.dim..(start + length) * config.dim].copy_from_slice(walk.data());
    let spoof = FrameEmbeddingSequence::new(id, full)?;
    let (sequence, annotation) = splice_partial(&bona, &spoof, start, length, config.crossfade)?;
    Ok(SynthUtterance {
        sequence,
        label,
        annotation: Some(annotation),
    })
}

/// Labels for `n` utterances: the configured bonafide share, shuffled.
fn split_labels(config: &SynthConfig, split: usize, n: usize) -> Vec<Label> {
    let n_bona = (n as f64 * config.bonafide_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_bona { Label::Bonafide } else { Label::Spoof })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(split as u64 + 1);
    labels.shuffle(&mut rng);
    labels
}

/// Generates a whole split in memory, in index order.
pub fn gen_split(config: &SynthConfig, split: usize, n: usize) -> Result<Vec<SynthUtterance>> {
    config.validate()?;
    split_labels(config, split, n)
        .into_par_iter()
        .enumerate()
        .map(|(i, label)| gen_utterance(config, split, i, label))
        .collect()
}

/// Paths written by [`gen_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub eval: PathBuf,
    pub annotations: PathBuf,
}

/// Writes `<out>/{train,val,eval}.csv`, `<out>/annotations.csv` and one
/// embedding file per utterance under `<out>/emb/`.
pub fn gen_dataset(config: &SynthConfig, counts: SplitCounts, out: &Path) -> Result<DatasetPaths> {
    config.validate()?;
    let emb_dir = out.join("emb");
    fs::create_dir_all(&emb_dir).map_err(|e| Error::io(format!("creating {}", emb_dir.display()), e))?;
    let mut annotations = Vec::new();
    let mut manifests = Vec::new();
    for (split, n) in [counts.train, counts.val, counts.eval].into_iter().enumerate() {
        let utts = gen_split(config, split, n)?;
        utts.par_iter().try_for_each(|u| {
            let path = emb_dir.join(format!("{}.tde", u.sequence.utterance_id));
            write_embedding_file(&u.sequence, &path)
        })?;
        let records: Vec<ManifestRecord> = utts
            .iter()
            .map(|u| ManifestRecord {
                utterance_id: u.sequence.utterance_id.clone(),
                file_path: format!("emb/{}.tde", u.sequence.utterance_id),
                label: u.label,
            })
            .collect();
        let path = out.join(format!("{}.csv", SPLIT_NAMES[split]));
        write_manifest(&path, &records)?;
        manifests.push(path);
        annotations.extend(utts.into_iter().filter_map(|u| u.annotation));
    }
    let ann_path = out.join("annotations.csv");
    write_annotations(&ann_path, &annotations)?;
    let mut m = manifests.into_iter();
    Ok(DatasetPaths {
        train: m.next().unwrap(),
        val: m.next().unwrap(),
        eval: m.next().unwrap(),
        annotations: ann_path,
    })
}
