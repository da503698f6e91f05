//! Utterance-level training with class-weighted cross-entropy and Adam.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Objective, ParamStore, Var, PROB_FLOOR};
use crate::embedding_io::{text_lines, Label, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{compute_auc, compute_eer, format_metric_report, ScoreEntry, ScoreSet};
use crate::model::{ModelConfig, TdamModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub bonafide: f64,
    pub spoof: f64,
}

impl Default for ClassWeights {
    /// Bonafide errors cost nine times as much, offsetting the class imbalance
    /// of partial-spoof corpora.
    fn default() -> Self {
        Self {
            bonafide: 9.0,
            spoof: 1.0,
        }
    }
}

impl ClassWeights {
    pub fn weight(&self, label: Label) -> f64 {
        match label {
            Label::Bonafide => self.bonafide,
            Label::Spoof => self.spoof,
        }
    }
}

/// `−w(label) · ln(max(p[label], 1e-12))` on a `[bonafide, spoof]` pair.
pub fn weighted_cross_entropy(probs: [f64; 2], label: Label, weights: &ClassWeights) -> f64 {
    -weights.weight(label) * probs[label.index()].max(PROB_FLOOR).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Coupled L2: `decay · θ` is added to the gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub class_weights: ClassWeights,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            batch_size: 2,
            epochs: 10,
            class_weights: ClassWeights::default(),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.class_weights.bonafide > 0.0
            && self.class_weights.spoof > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = grad[i] + cfg.weight_decay * value[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// A pooled utterance ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledUtterance {
    pub utterance_id: String,
    pub frames: Tensor,
    pub label: Label,
}

/// Reads and pools every utterance of `manifest`, in manifest order.
pub fn load_pooled(manifest: &Manifest, config: &ModelConfig) -> Result<Vec<PooledUtterance>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let seq = manifest.load(r)?;
            if seq.width() != config.d_in {
                return Err(Error::dim("embedding width", &[seq.width()], &[config.d_in]));
            }
            let pooled = crate::pooling::pool_variant(seq.frames(), config.t_prime, config.pool)?;
            Ok(PooledUtterance {
                utterance_id: r.utterance_id.clone(),
                frames: pooled.frames,
                label: r.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// NaN when the validation set lacks a class.
    pub val_eer: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_loss,val_eer";

impl TrainLog {
    /// Epoch with the lowest validation loss; the earliest wins ties.
    pub fn selected_epoch(&self) -> Option<usize> {
        self.epochs
            .iter()
            .filter(|r| !r.val_loss.is_nan())
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss).then(a.epoch.cmp(&b.epoch)))
            .map(|r| r.epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_eer);
        }
        s
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text_lines(text).enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TRAIN_LOG_HEADER => {}
            _ => return Err(err(1, format!("expected header {TRAIN_LOG_HEADER:?}"))),
        }
        let mut epochs = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let [e, tl, vl, ve] = f[..] else {
                return Err(err(i + 1, format!("expected 4 fields, got {}", f.len())));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(i + 1, format!("{s:?}: {e}")));
            epochs.push(EpochRecord {
                epoch: e.parse().map_err(|x| err(i + 1, format!("{e:?}: {x}")))?,
                train_loss: num(tl)?,
                val_loss: num(vl)?,
                val_eer: num(ve)?,
            });
        }
        Ok(Self { epochs })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub model: TdamModel,
    pub log: TrainLog,
}

fn record_loss(
    model: &TdamModel,
    g: &mut Graph,
    utt: &PooledUtterance,
    weights: &ClassWeights,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let trace = model.record_forward(g, &utt.frames, rng)?;
    g.weighted_nll(trace.utterance_probs, utt.label.index(), weights.weight(utt.label))
}

/// Mean weighted loss with dropout off.
pub fn mean_loss(model: &TdamModel, data: &[PooledUtterance], weights: &ClassWeights) -> Result<f64> {
    let losses = data
        .par_iter()
        .map(|u| {
            let mut g = Graph::new();
            let l = record_loss(model, &mut g, u, weights, None)?;
            Ok(g.value(l).data()[0])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Utterance scores with dropout off, in input order.
pub fn score_pooled(model: &TdamModel, data: &[PooledUtterance]) -> Result<ScoreSet> {
    let entries = data
        .par_iter()
        .map(|u| {
            Ok(ScoreEntry {
                utterance_id: u.utterance_id.clone(),
                score: model.detect_pooled(&u.frames)?.utterance_score,
                label: u.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet::new(entries))
}

fn require_both_classes(data: &[PooledUtterance], what: &str) -> Result<()> {
    let spoof = data.iter().filter(|u| u.label == Label::Spoof).count();
    if spoof == 0 || spoof == data.len() {
        return Err(Error::Contract(format!(
            "{what} needs both classes, got {} bonafide and {spoof} spoof",
            data.len() - spoof
        )));
    }
    Ok(())
}

/// Trains on pooled data, calling `on_epoch` after every epoch.
///
/// Initialization uses `seed` directly; shuffling and dropout draw from a
/// separate stream of the same seed.
pub fn train_pooled(
    train: &[PooledUtterance],
    val: &[PooledUtterance],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    require_both_classes(train, "training set")?;
    if val.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let mut model = TdamModel::new(model_config.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grad();
            for &i in batch {
                let mut g = Graph::new();
                let loss = record_loss(&model, &mut g, &train[i], &cfg.class_weights, Some(&mut rng))?;
                total += g.value(loss).data()[0];
                g.gradients(loss)?.accumulate_into(&mut model.params);
            }
            model.params.scale_grad(1.0 / batch.len() as f64);
            adam_step(&mut model.params, &mut adam, cfg);
        }
        let val_loss = mean_loss(&model, val, &cfg.class_weights)?;
        let val_eer = compute_eer(&score_pooled(&model, val)?).map_or(f64::NAN, |e| e.eer);
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            val_eer,
        };
        on_epoch(&record);
        log.epochs.push(record);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    model.params.zero_grad();
    Ok(TrainOutcome { model, log })
}

/// Loads both manifests and trains.
pub fn train(
    train_manifest: &Manifest,
    val_manifest: &Manifest,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let train = load_pooled(train_manifest, model_config)?;
    let val = load_pooled(val_manifest, model_config)?;
    train_pooled(&train, &val, model_config, cfg, on_epoch)
}

/// Scores `manifest` and formats `EER=...% AUC=...`.
pub fn evaluate(model: &TdamModel, manifest: &Manifest) -> Result<(ScoreSet, String)> {
    let data = load_pooled(manifest, &model.config)?;
    let scores = score_pooled(model, &data)?;
    let eer = compute_eer(&scores)?;
    let auc = compute_auc(&scores)?;
    Ok((scores, format_metric_report(eer.eer, auc)))
}

/// Weighted loss of one labeled utterance, for gradient checks.
pub struct UtteranceObjective {
    pub model: TdamModel,
    pub label: Label,
    pub weights: ClassWeights,
}

impl Objective for UtteranceObjective {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn loss(&self, graph: &mut Graph, input: &Tensor) -> Result<Var> {
        let trace = self.model.record_forward(graph, input, None)?;
        graph.weighted_nll(
            trace.utterance_probs,
            self.label.index(),
            self.weights.weight(self.label),
        )
    }
}
