//! The detection network.
//!
//! ```text
//! pooled F' (T'×D_in)
//!   → FC → dropout → FC → dropout → pre-activation residual block   = E (T'×D)
//!   → E_conv = conv1d_k3(E);  M[t] = E_conv[t+1] − E[t], M[T'−1] = 0
//!   → X1 = conv2d_3x3(1→C)(M)
//!   → X2 = up_1x1(C_down→C)(conv2d_5x5(down_1x1(C→C_down)(X1)))
//!   → gate = σ(fuse_1x1(C→1)(X1 + X2))
//!   → Y = gate ⊙ E
//!   → per-frame softmax(FC(Y)) over {bonafide, spoof}
//!   → utterance score = mean over frames of the spoof probability
//! ```

mod checkpoint;
mod config;

pub use checkpoint::{
    config_path_for, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    CHECKPOINT_MAGIC,
};
pub use config::{Ablation, ModelConfig, DEFAULT_T_PRIME};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::embedding_io::FrameEmbeddingSequence;
use crate::error::{Error, Result};
use crate::pooling::{pool_variant, PooledEmbedding};
use crate::tensor::Tensor;

/// Front-end output `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedEmbedding {
    pub frames: Tensor,
}

/// `M` and the temporally convolved embedding it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMap {
    pub values: Tensor,
    pub conv_context: Tensor,
}

/// First/second level maps (`C × T' × D`) and the `T' × D` gate. Maps that
/// an ablation removes are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub x1: Option<Tensor>,
    pub x2: Option<Tensor>,
    pub gate: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    /// Gated embedding `Y`.
    pub weighted: Tensor,
    /// `T' × 2`, columns bonafide then spoof.
    pub frame_probs: Tensor,
    /// Mean spoof probability over frames.
    pub utterance_score: f64,
    /// Mean gate value per frame.
    pub confidence_map: Vec<f64>,
}

/// Graph nodes of the attention stage.
#[derive(Debug, Clone, Copy)]
pub struct TdamTrace {
    pub conv_context: Var,
    pub difference: Var,
    pub x1: Option<Var>,
    pub x2: Option<Var>,
    pub gate: Var,
}

/// Graph nodes of one full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub refined: Var,
    pub tdam: Option<TdamTrace>,
    pub weighted: Var,
    pub frame_probs: Var,
    /// Length-2 vector: mean frame probabilities.
    pub utterance_probs: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdamModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const TEMPORAL_KERNEL: usize = 3;
const X1_KERNEL: usize = 3;
const X2_KERNEL: usize = 5;
const RES_KERNEL: usize = 3;

impl TdamModel {
    /// Builds the parameter set for `config`, uniformly initialized in
    /// `±sqrt(1/fan_in)` from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in Self::layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(fan_in) => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Const(c) => vec![c; n],
            };
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        Ok(Self { config, params })
    }

    /// Names, shapes and initializers of every parameter `config` needs.
    fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let (d_in, d, c, cd) = (config.d_in, config.d_model, config.channels, config.channels_down);
        let mut l: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let dense = |l: &mut Vec<_>, name: &str, w: Vec<usize>, fan_in: usize| {
            let out = w[0];
            l.push((format!("{name}.weight"), w, Init::Uniform(fan_in)));
            l.push((format!("{name}.bias"), vec![out], Init::Uniform(fan_in)));
        };
        let norm = |l: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
            l.push((format!("{name}.gain"), vec![d], Init::Const(1.0)));
            l.push((format!("{name}.bias"), vec![d], Init::Const(0.0)));
        };
        dense(&mut l, "fc1", vec![d, d_in], d_in);
        dense(&mut l, "fc2", vec![d, d], d);
        norm(&mut l, "res.norm1");
        dense(&mut l, "res.conv1", vec![d, d, RES_KERNEL], d * RES_KERNEL);
        norm(&mut l, "res.norm2");
        dense(&mut l, "res.conv2", vec![d, d, RES_KERNEL], d * RES_KERNEL);
        let a = config.ablation;
        if !a.disable_tdam {
            dense(&mut l, "tdam.temporal", vec![d, d, TEMPORAL_KERNEL], d * TEMPORAL_KERNEL);
            if a.disable_dual_level {
                dense(&mut l, "tdam.single", vec![1, 1, X1_KERNEL, X1_KERNEL], X1_KERNEL * X1_KERNEL);
            } else {
                dense(&mut l, "tdam.x1", vec![c, 1, X1_KERNEL, X1_KERNEL], X1_KERNEL * X1_KERNEL);
                if !a.disable_x2 {
                    dense(&mut l, "tdam.down", vec![cd, c, 1, 1], c);
                    dense(&mut l, "tdam.mid", vec![cd, cd, X2_KERNEL, X2_KERNEL], cd * X2_KERNEL * X2_KERNEL);
                    dense(&mut l, "tdam.up", vec![c, cd, 1, 1], cd);
                }
                dense(&mut l, "tdam.fuse", vec![1, c, 1, 1], c);
            }
        }
        dense(&mut l, "classifier", vec![2, d], d);
        l
    }

    /// Parameter names and shapes `config` requires, in store order.
    pub fn expected_params(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Self::layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let id = self.params.require(name)?;
        Ok(g.param(&self.params, id))
    }

    fn dense(&self, g: &mut Graph, name: &str) -> Result<(Var, Var)> {
        Ok((self.p(g, &format!("{name}.weight"))?, self.p(g, &format!("{name}.bias"))?))
    }

    fn conv2d(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let (w, b) = self.dense(g, name)?;
        g.conv2d(x, w, b)
    }

    /// Records FC → dropout → FC → dropout → residual block. Dropout is
    /// active only when `rng` is given.
    pub fn record_front_end(
        &self,
        g: &mut Graph,
        pooled: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let width = g.value(pooled).shape();
        if width.len() != 2 || width[1] != self.config.d_in {
            return Err(Error::dim("front_end", width, &[self.config.t_prime, self.config.d_in]));
        }
        let p = self.config.dropout;
        let (w, b) = self.dense(g, "fc1")?;
        let h = g.affine(pooled, w, b)?;
        let h = g.dropout(h, p, rng.as_deref_mut())?;
        let (w, b) = self.dense(g, "fc2")?;
        let h = g.affine(h, w, b)?;
        let h = g.dropout(h, p, rng)?;

        let (gain, beta) = (self.p(g, "res.norm1.gain")?, self.p(g, "res.norm1.bias")?);
        let r = g.layer_norm(h, gain, beta)?;
        let r = g.relu(r);
        let (w, b) = self.dense(g, "res.conv1")?;
        let r = g.conv1d(r, w, b)?;
        let (gain, beta) = (self.p(g, "res.norm2.gain")?, self.p(g, "res.norm2.bias")?);
        let r = g.layer_norm(r, gain, beta)?;
        let r = g.relu(r);
        let (w, b) = self.dense(g, "res.conv2")?;
        let r = g.conv1d(r, w, b)?;
        g.add(h, r)
    }

    /// Records `M[t] = conv1d(E)[t+1] − E[t]` with a zero last row.
    /// Returns `(M, E_conv)`.
    pub fn record_difference_map(&self, g: &mut Graph, refined: Var) -> Result<(Var, Var)> {
        if g.value(refined).shape()[0] < 2 {
            return Err(Error::Input("difference map needs T' >= 2".into()));
        }
        let (w, b) = self.dense(g, "tdam.temporal")?;
        let conv = g.conv1d(refined, w, b)?;
        let mut m = g.temporal_difference(conv, refined)?;
        if self.config.ablation.absolute_difference {
            m = g.abs(m);
        }
        Ok((m, conv))
    }

    /// Records the dual-level maps and the sigmoid gate for `M: T' × D`.
    pub fn record_attention(&self, g: &mut Graph, m: Var) -> Result<(Option<Var>, Option<Var>, Var)> {
        let shape = g.value(m).shape().to_vec();
        let (t, d) = (shape[0], shape[1]);
        let m3 = g.reshape(m, &[1, t, d])?;
        let a = self.config.ablation;
        let (x1, x2, logits) = if a.disable_dual_level {
            (None, None, self.conv2d(g, m3, "tdam.single")?)
        } else {
            let x1 = self.conv2d(g, m3, "tdam.x1")?;
            let (x2, fused) = if a.disable_x2 {
                (None, x1)
            } else {
                let down = self.conv2d(g, x1, "tdam.down")?;
                let mid = self.conv2d(g, down, "tdam.mid")?;
                let x2 = self.conv2d(g, mid, "tdam.up")?;
                (Some(x2), g.add(x1, x2)?)
            };
            (Some(x1), x2, self.conv2d(g, fused, "tdam.fuse")?)
        };
        let gate = g.sigmoid(logits);
        let gate = g.reshape(gate, &[t, d])?;
        Ok((x1, x2, gate))
    }

    /// Records `Y = gate ⊙ E`, or `Y = E` when attention is disabled.
    pub fn record_tdam(&self, g: &mut Graph, refined: Var) -> Result<(Var, Option<TdamTrace>)> {
        if self.config.ablation.disable_tdam {
            return Ok((refined, None));
        }
        let (difference, conv_context) = self.record_difference_map(g, refined)?;
        let (x1, x2, gate) = self.record_attention(g, difference)?;
        let y = g.mul(gate, refined)?;
        let trace = TdamTrace {
            conv_context,
            difference,
            x1,
            x2,
            gate,
        };
        Ok((y, Some(trace)))
    }

    /// Records per-frame class probabilities and their mean over frames.
    pub fn record_classifier(&self, g: &mut Graph, y: Var) -> Result<(Var, Var)> {
        let (w, b) = self.dense(g, "classifier")?;
        let logits = g.affine(y, w, b)?;
        let probs = g.softmax(logits);
        let mean = g.mean_rows(probs)?;
        Ok((probs, mean))
    }

    /// Records the whole network on a pooled `T' × D_in` input.
    pub fn record_forward(
        &self,
        g: &mut Graph,
        pooled: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardTrace> {
        let x = g.leaf(pooled.clone());
        let refined = self.record_front_end(g, x, rng)?;
        let (weighted, tdam) = self.record_tdam(g, refined)?;
        let (frame_probs, utterance_probs) = self.record_classifier(g, weighted)?;
        Ok(ForwardTrace {
            refined,
            tdam,
            weighted,
            frame_probs,
            utterance_probs,
        })
    }

    pub fn pool(&self, frames: &Tensor) -> Result<PooledEmbedding> {
        pool_variant(frames, self.config.t_prime, self.config.pool)
    }

    pub fn front_end_forward(
        &self,
        pooled: &PooledEmbedding,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<RefinedEmbedding> {
        let mut g = Graph::new();
        let x = g.leaf(pooled.frames.clone());
        let e = self.record_front_end(&mut g, x, rng)?;
        Ok(RefinedEmbedding {
            frames: g.value(e).clone(),
        })
    }

    pub fn difference_map(&self, refined: &RefinedEmbedding) -> Result<DifferenceMap> {
        let mut g = Graph::new();
        let e = g.leaf(refined.frames.clone());
        let (m, conv) = self.record_difference_map(&mut g, e)?;
        Ok(DifferenceMap {
            values: g.value(m).clone(),
            conv_context: g.value(conv).clone(),
        })
    }

    pub fn dual_level_attention(&self, m: &DifferenceMap) -> Result<AttentionMaps> {
        let mut g = Graph::new();
        let mv = g.leaf(m.values.clone());
        let (x1, x2, gate) = self.record_attention(&mut g, mv)?;
        Ok(AttentionMaps {
            x1: x1.map(|v| g.value(v).clone()),
            x2: x2.map(|v| g.value(v).clone()),
            gate: g.value(gate).clone(),
        })
    }

    /// Returns `Y` and the per-frame mean gate.
    pub fn tdam_forward(&self, refined: &RefinedEmbedding) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let e = g.leaf(refined.frames.clone());
        let (y, trace) = self.record_tdam(&mut g, e)?;
        let t = refined.frames.shape()[0];
        let confidence = match trace {
            Some(tr) => row_means(g.value(tr.gate)),
            None => vec![1.0; t],
        };
        Ok((g.value(y).clone(), confidence))
    }

    /// Frame and utterance predictions for a gated embedding `Y`.
    pub fn classify(&self, y: &Tensor) -> Result<(Tensor, f64)> {
        let mut g = Graph::new();
        let yv = g.leaf(y.clone());
        let (probs, mean) = self.record_classifier(&mut g, yv)?;
        Ok((g.value(probs).clone(), g.value(mean).data()[1]))
    }

    /// Runs the inference path (dropout off) on an already pooled input.
    pub fn detect_pooled(&self, pooled: &Tensor) -> Result<DetectionOutput> {
        let mut g = Graph::new();
        let tr = self.record_forward(&mut g, pooled, None)?;
        let t = pooled.shape()[0];
        let confidence_map = match tr.tdam {
            Some(td) => row_means(g.value(td.gate)),
            None => vec![1.0; t],
        };
        Ok(DetectionOutput {
            weighted: g.value(tr.weighted).clone(),
            frame_probs: g.value(tr.frame_probs).clone(),
            utterance_score: g.value(tr.utterance_probs).data()[1],
            confidence_map,
        })
    }

    /// Pools a raw `T × D_in` sequence and runs the inference path.
    pub fn detect(&self, frames: &Tensor) -> Result<DetectionOutput> {
        let pooled = self.pool(frames)?;
        self.detect_pooled(&pooled.frames)
    }

    pub fn score(&self, seq: &FrameEmbeddingSequence) -> Result<f64> {
        Ok(self.detect(seq.frames())?.utterance_score)
    }

    /// Per-frame confidence of the pooled sequence, in (0, 1).
    pub fn export_confidence_map(&self, seq: &FrameEmbeddingSequence) -> Result<Vec<f64>> {
        if seq.len() < 2 {
            return Err(Error::Input("confidence map needs T >= 2".into()));
        }
        let pooled = self.pool(seq.frames())?;
        let refined = self.front_end_forward(&pooled, None)?;
        Ok(self.tdam_forward(&refined)?.1)
    }
}

enum Init {
    Uniform(usize),
    Const(f64),
}

fn row_means(t: &Tensor) -> Vec<f64> {
    t.rows().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect()
}
