use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pooling::PoolMode;

/// Component switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    /// Skip attention entirely: `Y = E`.
    pub disable_tdam: bool,
    /// Gate from a single 3×3 convolution of the difference map.
    pub disable_dual_level: bool,
    /// Gate from the first-level map only.
    pub disable_x2: bool,
    /// Use `|M|`, discarding the sign of the difference.
    pub absolute_difference: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["none", "no-tdam", "no-dual", "no-x2", "absdiff"];

    pub fn name(&self) -> &'static str {
        match (
            self.disable_tdam,
            self.disable_dual_level,
            self.disable_x2,
            self.absolute_difference,
        ) {
            (false, false, false, false) => "none",
            (true, false, false, false) => "no-tdam",
            (false, true, false, false) => "no-dual",
            (false, false, true, false) => "no-x2",
            (false, false, false, true) => "absdiff",
            _ => "custom",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match s {
            "none" => {}
            "no-tdam" => a.disable_tdam = true,
            "no-dual" => a.disable_dual_level = true,
            "no-x2" => a.disable_x2 = true,
            "absdiff" => a.absolute_difference = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}, expected one of {:?}",
                    Ablation::NAMES
                )))
            }
        }
        Ok(a)
    }
}

/// Network shape and variant selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Width of the incoming frame embeddings.
    pub d_in: usize,
    /// Width after the two fully connected layers.
    pub d_model: usize,
    /// Pooled sequence length.
    pub t_prime: usize,
    /// Attention channels of the first-level map.
    pub channels: usize,
    /// Bottleneck channels of the second-level map.
    pub channels_down: usize,
    pub dropout: f64,
    pub ablation: Ablation,
    pub pool: PoolMode,
}

/// 4 s of 20 ms frames.
pub const DEFAULT_T_PRIME: usize = 200;

impl ModelConfig {
    /// Reference sizes: width 64, 200 pooled frames, 32 → 4 attention
    /// channels, dropout 0.2.
    pub fn standard(d_in: usize) -> Self {
        Self {
            d_in,
            d_model: 64,
            t_prime: DEFAULT_T_PRIME,
            channels: 32,
            channels_down: 4,
            dropout: 0.2,
            ablation: Ablation::default(),
            pool: PoolMode::Average,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_in == 0 || self.d_model == 0 {
            return bad(format!("widths must be positive (d_in={}, d_model={})", self.d_in, self.d_model));
        }
        if self.t_prime < 2 {
            return bad(format!("t_prime must be at least 2, got {}", self.t_prime));
        }
        if self.channels_down == 0 || self.channels_down >= self.channels {
            return bad(format!(
                "need 0 < channels_down < channels, got {} and {}",
                self.channels_down, self.channels
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let a = &self.ablation;
        let _ = writeln!(s, "d_in={}", self.d_in);
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "t_prime={}", self.t_prime);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "channels_down={}", self.channels_down);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "pool={}", self.pool);
        let _ = writeln!(s, "disable_tdam={}", a.disable_tdam);
        let _ = writeln!(s, "disable_dual_level={}", a.disable_dual_level);
        let _ = writeln!(s, "disable_x2={}", a.disable_x2);
        let _ = writeln!(s, "absolute_difference={}", a.absolute_difference);
        s
    }

    /// Parses `key=value` text. Keys that are absent keep their
    /// [`ModelConfig::standard`] value; `d_in` is required.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::standard(0);
        let mut saw_d_in = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value", i + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                Error::Config(format!("line {}: bad value for {key}: {e}", i + 1))
            };
            let uint = || value.parse::<usize>().map_err(|e| bad(&e));
            let flag = || value.parse::<bool>().map_err(|e| bad(&e));
            match key {
                "d_in" => {
                    cfg.d_in = uint()?;
                    saw_d_in = true;
                }
                "d_model" => cfg.d_model = uint()?,
                "t_prime" => cfg.t_prime = uint()?,
                "channels" => cfg.channels = uint()?,
                "channels_down" => cfg.channels_down = uint()?,
                "dropout" => cfg.dropout = value.parse().map_err(|e| bad(&e))?,
                "pool" => cfg.pool = value.parse()?,
                "disable_tdam" => cfg.ablation.disable_tdam = flag()?,
                "disable_dual_level" => cfg.ablation.disable_dual_level = flag()?,
                "disable_x2" => cfg.ablation.disable_x2 = flag()?,
                "absolute_difference" => cfg.ablation.absolute_difference = flag()?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", i + 1))),
            }
        }
        if !saw_d_in {
            return Err(Error::Config("missing d_in".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
