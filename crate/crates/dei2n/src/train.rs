//! Mini-batch training with the Adam optimizer, deterministic shuffling and
//! dropout streams, per-epoch checkpoints, evaluation, and the ablation
//! suite that retrains every model variant on identical data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::save_checkpoint;
use crate::encoding::{EncodedSample, Hyper};
use crate::metrics::{auc, rela_impr};
use crate::model::{bce_loss, AblationConfig, Batch, ModelParams, Variant};
use crate::params::ParamSet;
use crate::synth::fnv1a64;
use crate::{Error, Result};

// ── configuration ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 256,
            epochs: 1,
            dropout: 0.1,
            seed: 7,
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        self.ablation.validate()
    }
}

/// Derives an independent RNG stream from the run seed and a role label, so
/// shuffling and per-batch dropout never share draws.
fn stream_rng(seed: u64, role: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut bytes = Vec::with_capacity(role.len() + 24);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(role.as_bytes());
    bytes.extend_from_slice(&a.to_le_bytes());
    bytes.extend_from_slice(&b.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}

// ── optimizer ──

/// Adam with bias correction; moment buffers follow the parameter layout.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(set: &ParamSet, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: set.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: set.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    /// Applies one update; `grads` holds one gradient slice per tensor, in
    /// the set's registration order.
    pub fn step(&mut self, set: &mut ParamSet, grads: &[&[f64]]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradient slices for {} tensors",
                grads.len(),
                self.m.len()
            )));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for ((tensor, grad), (m, v)) in
            set.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
        {
            if grad.len() != tensor.data.len() {
                return Err(Error::InvalidArgument(format!(
                    "gradient length {} for tensor {} of size {}",
                    grad.len(),
                    tensor.name,
                    tensor.data.len()
                )));
            }
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

// ── training loop ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub n_batches: usize,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: ModelParams,
    pub epochs: Vec<EpochStats>,
}

fn diagnostics(set: &ParamSet) -> String {
    let mut worst: Vec<(String, f64)> = set.norms();
    worst.sort_by(|a, b| b.1.total_cmp(&a.1));
    worst
        .iter()
        .take(5)
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Runs `epochs` passes of shuffled mini-batch Adam over the training set.
/// Deterministic for a fixed config and data: shuffles and dropout masks are
/// derived from the run seed alone. When `checkpoint_dir` is given, the model
/// is written there after every epoch as `epoch-NNN.ckpt`.
pub fn train(
    cfg: &TrainConfig,
    hyper: &Hyper,
    samples: &[EncodedSample],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let model = ModelParams::init(hyper.clone(), cfg.ablation, cfg.seed)?;
    train_from(cfg, model, samples, checkpoint_dir)
}

/// Like [`train`] but continues from an existing model (e.g. a loaded
/// checkpoint) instead of a fresh initialization.
pub fn train_from(
    cfg: &TrainConfig,
    mut model: ModelParams,
    samples: &[EncodedSample],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if model.ablation != cfg.ablation {
        return Err(Error::InvalidArgument(
            "training config and model disagree on the ablation setting".into(),
        ));
    }
    let mut opt = Adam::new(&model.set, cfg.learning_rate);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, "shuffle", epoch as u64, 0));

        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let picked: Vec<EncodedSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let batch = Batch::from_samples(&picked)?;
            let mut g = Graph::new();
            let ids = model.set.bind(&mut g);
            let mut dropout_rng =
                stream_rng(cfg.seed, "dropout", epoch as u64, batch_idx as u64);
            let out = model.forward(&mut g, &ids, &batch, true, cfg.dropout, &mut dropout_rng)?;
            let loss = bce_loss(&mut g, out.preds, &batch.labels)?;
            let loss_val = g.value(loss);
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    detail: format!("loss {loss_val}; largest norms: {}", diagnostics(&model.set)),
                });
            }
            let grads = g.backward(loss)?;
            let slices: Vec<&[f64]> = ids
                .iter()
                .map(|id| grads.get(id).map(Vec::as_slice).unwrap_or(&[]))
                .collect();
            opt.step(&mut model.set, &slices)?;
            loss_sum += loss_val;
            n_batches += 1;
        }
        epochs.push(EpochStats { epoch, mean_loss: loss_sum / n_batches as f64, n_batches });
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(&dir.join(format!("epoch-{:03}.ckpt", epoch + 1)), &model)?;
        }
    }
    Ok(TrainOutput { model, epochs })
}

// ── evaluation ──

pub struct EvalOutput {
    pub auc: f64,
    pub mean_loss: f64,
    /// Predicted click probability per sample, in input order.
    pub preds: Vec<f64>,
    /// Gate weight on the trigger side per sample, when the gate is active.
    pub p_tr: Option<Vec<f64>>,
}

/// Scores a sample set with dropout off and computes AUC against the labels.
pub fn evaluate(
    model: &ModelParams,
    samples: &[EncodedSample],
    batch_size: usize,
) -> Result<EvalOutput> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let gated = model.ablation.has_gate();
    let mut preds = Vec::with_capacity(samples.len());
    let mut p_tr = gated.then(|| Vec::with_capacity(samples.len()));
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::from_samples(chunk)?;
        let mut g = Graph::new();
        let ids = model.set.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut g, &ids, &batch, false, 0.0, &mut rng)?;
        let loss = bce_loss(&mut g, out.preds, &batch.labels)?;
        loss_sum += g.value(loss) * chunk.len() as f64;
        preds.extend_from_slice(g.data(out.preds));
        if let (Some(store), Some(probs)) = (p_tr.as_mut(), out.p_probs) {
            store.extend(g.data(probs).chunks(2).map(|row| row[0]));
        }
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label as u8).collect();
    Ok(EvalOutput {
        auc: auc(&preds, &labels)?,
        mean_loss: loss_sum / samples.len() as f64,
        preds,
        p_tr,
    })
}

// ── ablation suite ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub auc: f64,
    /// Relative improvement of this variant over the full model, in percent.
    pub rela_impr_vs_full: f64,
}

/// Trains the full model plus all five reduced variants with identical seed
/// and data order, then scores each on the test split. The full model's row
/// comes first and is its own baseline (0.00%).
pub fn ablation_suite(
    base: &TrainConfig,
    hyper: &Hyper,
    train_set: &[EncodedSample],
    test_set: &[EncodedSample],
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(Variant, f64),
) -> Result<Vec<VariantResult>> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    let mut full_auc = 0.0;
    for variant in Variant::ALL {
        let cfg = TrainConfig { ablation: variant.config(), ..base.clone() };
        let dir = checkpoint_dir.map(|d| d.join(variant.label().to_lowercase()));
        let out = train(&cfg, hyper, train_set, dir.as_deref())?;
        let eval = evaluate(&out.model, test_set, base.batch_size)?;
        if variant == Variant::Full {
            full_auc = eval.auc;
        }
        progress(variant, eval.auc);
        rows.push(VariantResult {
            variant: variant.label().to_string(),
            auc: eval.auc,
            rela_impr_vs_full: rela_impr(eval.auc, full_auc)?,
        });
    }
    Ok(rows)
}

// ── tests ──
