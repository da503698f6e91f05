//! Fixed-length pooling of variable-length embedding sequences.
//!
//! The default path splits the `T` input frames into `T'` contiguous
//! segments whose sizes differ by at most one and averages each segment.
//! Sequences shorter than `T'` are copied and zero-padded at the tail.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Contiguous partition of `[0, T)` into `T'` segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPartition {
    boundaries: Vec<usize>,
}

impl SegmentPartition {
    /// `T' + 1` monotone indices, starting at 0 and ending at `T`.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.boundaries[i]..self.boundaries[i + 1]
    }

    pub fn segments(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.boundaries.windows(2).map(|w| w[0]..w[1])
    }
}

/// Splits `t` frames into `t_prime` segments with boundaries `⌊i·T/T'⌋`.
pub fn partition_segments(t: usize, t_prime: usize) -> Result<SegmentPartition> {
    if t_prime == 0 || t < t_prime {
        return Err(Error::Contract(format!(
            "cannot partition {t} frames into {t_prime} non-empty segments; pad instead"
        )));
    }
    let boundaries = (0..=t_prime).map(|i| i * t / t_prime).collect();
    Ok(SegmentPartition { boundaries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub frames: Tensor,
    /// `true` for trailing slots filled with zeros.
    pub pad_mask: Vec<bool>,
}

impl PooledEmbedding {
    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn padded_slots(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| p).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Average,
    Max,
    TrimPad,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Average => "avg",
            PoolMode::Max => "max",
            PoolMode::TrimPad => "trimpad",
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "average" => Ok(PoolMode::Average),
            "max" => Ok(PoolMode::Max),
            "trimpad" | "trim_pad" => Ok(PoolMode::TrimPad),
            other => Err(Error::Config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

fn check_input(frames: &Tensor, t_prime: usize) -> Result<(usize, usize)> {
    let shape = frames.shape();
    if shape.len() != 2 {
        return Err(Error::Input(format!("expected a T×D matrix, got {shape:?}")));
    }
    if shape[0] < 2 {
        return Err(Error::Input(format!("need at least 2 frames, got {}", shape[0])));
    }
    if t_prime == 0 {
        return Err(Error::Config("pooled length must be positive".into()));
    }
    Ok((shape[0], shape[1]))
}

/// Copies the first `min(T, T')` frames and zero-fills the rest.
fn copy_and_pad(frames: &Tensor, t: usize, d: usize, t_prime: usize) -> PooledEmbedding {
    let kept = t.min(t_prime);
    let mut data = frames.data()[..kept * d].to_vec();
    data.resize(t_prime * d, 0.0);
    PooledEmbedding {
        frames: Tensor::new(&[t_prime, d], data).expect("pooled shape"),
        pad_mask: (0..t_prime).map(|i| i >= kept).collect(),
    }
}

fn pool_segments(
    frames: &Tensor,
    t: usize,
    d: usize,
    t_prime: usize,
    reduce: impl Fn(&mut [f64], &Tensor, std::ops::Range<usize>),
) -> Result<PooledEmbedding> {
    if t < t_prime {
        return Ok(copy_and_pad(frames, t, d, t_prime));
    }
    let partition = partition_segments(t, t_prime)?;
    let mut data = vec![0.0; t_prime * d];
    for (i, seg) in partition.segments().enumerate() {
        reduce(&mut data[i * d..(i + 1) * d], frames, seg);
    }
    Ok(PooledEmbedding {
        frames: Tensor::new(&[t_prime, d], data)?,
        pad_mask: vec![false; t_prime],
    })
}

/// Averages each segment of a `T × D` sequence into one of `T'` rows.
pub fn adaptive_average_pool(frames: &Tensor, t_prime: usize) -> Result<PooledEmbedding> {
    let (t, d) = check_input(frames, t_prime)?;
    pool_segments(frames, t, d, t_prime, |out, f, seg| {
        let n = seg.len() as f64;
        for r in seg {
            for (o, v) in out.iter_mut().zip(f.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
    })
}

/// Pools with the chosen strategy. `Max` takes the coordinatewise maximum
/// per segment; `TrimPad` truncates or zero-pads without pooling.
pub fn pool_variant(frames: &Tensor, t_prime: usize, mode: PoolMode) -> Result<PooledEmbedding> {
    match mode {
        PoolMode::Average => adaptive_average_pool(frames, t_prime),
        PoolMode::Max => {
            let (t, d) = check_input(frames, t_prime)?;
            pool_segments(frames, t, d, t_prime, |out, f, seg| {
                out.fill(f64::NEG_INFINITY);
                for r in seg {
                    for (o, v) in out.iter_mut().zip(f.row(r)) {
                        *o = o.max(*v);
                    }
                }
            })
        }
        PoolMode::TrimPad => {
            let (t, d) = check_input(frames, t_prime)?;
            Ok(copy_and_pad(frames, t, d, t_prime))
        }
    }
}

/// Maps per-frame flags of the raw sequence onto pooled slots.
///
/// A slot is flagged when at least half of its source frames are flagged.
/// Padded slots are never flagged.
pub fn project_frame_flags(flags: &[bool], t_prime: usize, mode: PoolMode) -> Vec<bool> {
    let t = flags.len();
    if t < t_prime || mode == PoolMode::TrimPad {
        return (0..t_prime).map(|i| i < t && flags[i]).collect();
    }
    let partition = partition_segments(t, t_prime).expect("t >= t_prime");
    partition
        .segments()
        .map(|seg| {
            let n = seg.len();
            let hits = flags[seg].iter().filter(|&&f| f).count();
            2 * hits >= n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn partition_examples() {
        let p = partition_segments(6, 3).unwrap();
        assert_eq!(p.segments().collect::<Vec<_>>(), vec![0..2, 2..4, 4..6]);
        let p = partition_segments(7, 3).unwrap();
        let sizes: Vec<usize> = p.segments().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![2, 2, 3]);
        let p = partition_segments(3, 3).unwrap();
        assert_eq!(p.segments().collect::<Vec<_>>(), vec![0..1, 1..2, 2..3]);
        assert!(matches!(partition_segments(2, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn partition_sizes_differ_by_at_most_one() {
        for t in 1..=60 {
            for tp in 1..=t {
                let p = partition_segments(t, tp).unwrap();
                assert_eq!(p.boundaries()[0], 0);
                assert_eq!(*p.boundaries().last().unwrap(), t);
                let sizes: Vec<usize> = p.segments().map(|s| s.len()).collect();
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                assert!(*lo >= 1 && hi - lo <= 1, "T={t} T'={tp}: {sizes:?}");
            }
        }
    }

    #[test]
    fn average_examples() {
        let p = adaptive_average_pool(&col(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(p.frames.data(), &[1.5, 3.5]);
        let p = adaptive_average_pool(&col(&[1.0, 2.0, 3.0]), 2).unwrap();
        assert_eq!(p.frames.data(), &[1.0, 2.5]);

        let f = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = adaptive_average_pool(&f, 4).unwrap();
        assert_eq!(p.frames.data(), &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.pad_mask, vec![false, false, true, true]);
    }

    #[test]
    fn equal_lengths_are_identity() {
        let f = Tensor::new(&[5, 2], (0..10).map(|v| v as f64 * 0.3).collect()).unwrap();
        let p = adaptive_average_pool(&f, 5).unwrap();
        assert_eq!(p.frames, f);
        assert_eq!(p.padded_slots(), 0);
    }

    #[test]
    fn variant_examples() {
        let p = pool_variant(&col(&[1.0, 5.0, 2.0, 0.0]), 2, PoolMode::Max).unwrap();
        assert_eq!(p.frames.data(), &[5.0, 2.0]);

        let f = col(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = pool_variant(&f, 4, PoolMode::TrimPad).unwrap();
        assert_eq!(p.frames.data(), &[1.0, 2.0, 3.0, 4.0]);
        let p = pool_variant(&col(&[1.0, 2.0]), 3, PoolMode::TrimPad).unwrap();
        assert_eq!(p.frames.data(), &[1.0, 2.0, 0.0]);
        assert_eq!(p.pad_mask, vec![false, false, true]);

        let f = col(&[0.1, 0.7, -0.4, 2.0, 1.0, 0.0, 3.0]);
        assert_eq!(
            pool_variant(&f, 3, PoolMode::Average).unwrap(),
            adaptive_average_pool(&f, 3).unwrap()
        );
    }

    #[test]
    fn single_frame_is_rejected() {
        assert!(matches!(adaptive_average_pool(&col(&[1.0]), 2), Err(Error::Input(_))));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [PoolMode::Average, PoolMode::Max, PoolMode::TrimPad] {
            assert_eq!(m.as_str().parse::<PoolMode>().unwrap(), m);
        }
        assert!("median".parse::<PoolMode>().is_err());
    }

    #[test]
    fn flag_projection_uses_majority() {
        let flags = [false, false, true, true, true, false];
        assert_eq!(project_frame_flags(&flags, 3, PoolMode::Average), vec![false, true, true]);
        assert_eq!(
            project_frame_flags(&flags[..2], 4, PoolMode::Average),
            vec![false, false, false, false]
        );
    }
}
