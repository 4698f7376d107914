//! Optimization loop: one-hot BCE on sigmoid logits, Adam, linear warmup
//! followed by cosine decay. Fully deterministic given the seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, augment_rng, batch_tensor, encode_for_model, DatasetManifest, Split};
use crate::error::{HxError, Result};
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Stop once test accuracy reaches this value (best checkpoint kept).
    pub stop_at_accuracy: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale recipe: converges on the synthetic set in minutes.
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            lr_max: 1e-3,
            warmup_epochs: 10,
            total_epochs: 40,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            stop_at_accuracy: None,
        }
    }

    /// The published recipe: lr 1e-5, 10 warmup epochs, cosine decay over
    /// 200 epochs, batch 128.
    pub fn paper(seed: u64) -> TrainConfig {
        TrainConfig {
            lr_max: 1e-5,
            total_epochs: 200,
            batch_size: 128,
            ..TrainConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(HxError::InvalidArgument(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.lr_max <= 0.0 || self.batch_size == 0 {
            return Err(HxError::InvalidArgument(
                "lr_max and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear ramp to lr_max over the warmup, then cosine decay to zero.
/// Continuous at the warmup boundary.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_epochs as f64, cfg.total_epochs as f64);
    if epoch < w {
        cfg.lr_max * (epoch / w)
    } else {
        cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * (epoch - w) / (t - w)).cos())
    }
}

/// One-hot rows for class labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0f32; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(HxError::InvalidArgument(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        data[i * num_classes + l] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), num_classes], data)
}

/// Mean binary cross entropy of sigmoid(logits) against one-hot targets,
/// in the overflow-free form max(z,0) - z*y + log(1 + exp(-|z|)).
pub fn bce_loss(logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    if logits.shape() != onehot.shape() {
        return Err(HxError::ShapeMismatch {
            left: logits.shape().to_vec(),
            right: onehot.shape().to_vec(),
            context: "bce_loss".into(),
        });
    }
    {
        let t = onehot.data_ref();
        let k = onehot.shape()[1];
        for row in t.chunks(k) {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != k {
                return Err(HxError::InvalidArgument(
                    "targets must be one-hot rows".into(),
                ));
            }
        }
    }
    let zero = Tensor::scalar(0.0);
    let hinge = logits.max2(&zero)?;
    let linear = logits.mul(onehot)?;
    let softplus = logits
        .abs()
        .mul_scalar(-1.0)
        .exp_elem()
        .add_scalar(1.0)
        .log_elem();
    hinge.sub(&linear)?.add(&softplus)?.mean_all()
}

/// Bias-corrected Adam moments, one pair per parameter tensor.
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over all parameters. Parameters with no gradient (zero
/// fan-out this step) are left untouched.
pub fn adam_step(params: &[Tensor], state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for (i, p) in params.iter().enumerate() {
        let Some(grad) = p.grad() else { continue };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        p.update_data(|data| {
            for k in 0..data.len() {
                let g = grad[k] as f64;
                let mk = cfg.adam_beta1 * m[k] as f64 + (1.0 - cfg.adam_beta1) * g;
                let vk = cfg.adam_beta2 * v[k] as f64 + (1.0 - cfg.adam_beta2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + cfg.adam_eps);
                data[k] = (data[k] as f64 - update) as f32;
            }
        });
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub struct TrainState {
    pub metrics: Vec<EpochMetrics>,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Argmax with ties broken by the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn encode_batch(
    manifest: &DatasetManifest,
    indices: &[usize],
    channels: usize,
    augment_pass: Option<(u64, usize)>,
) -> Result<(Tensor, Vec<usize>)> {
    let mut images = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let (h, w) = {
        let img = manifest.image(indices[0]);
        (img.h, img.w)
    };
    for &i in indices {
        let img = manifest.image(i);
        let encoded = match augment_pass {
            Some((seed, epoch)) => {
                let mut rng = augment_rng(seed, i, epoch);
                encode_for_model(&augment(img, &mut rng), channels)?
            }
            None => encode_for_model(img, channels)?,
        };
        images.push(encoded);
        labels.push(manifest.label(i));
    }
    Ok((batch_tensor(&images, channels, h, w)?, labels))
}

/// Mean loss and accuracy over one split, without augmentation.
pub fn evaluate_split(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let indices = manifest.indices_of(split);
    if indices.is_empty() {
        return Err(HxError::Dataset("empty evaluation split".into()));
    }
    let channels = model.config().input_channels;
    let k = model.config().num_classes;
    let mut total_loss = 0.0f64;
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = encode_batch(manifest, chunk, channels, None)?;
        let logits = model.forward(&x)?;
        let loss = bce_loss(&logits, &one_hot(&labels, k)?)?;
        total_loss += loss.item() as f64 * chunk.len() as f64;
        let lv = logits.to_vec();
        for (r, &label) in labels.iter().enumerate() {
            if argmax(&lv[r * k..][..k]) == label {
                correct += 1;
            }
        }
    }
    Ok((
        total_loss / indices.len() as f64,
        correct as f64 / indices.len() as f64,
    ))
}

/// Full training run: per-epoch train loss and test accuracy appended to
/// `metrics.jsonl` under `out_dir`, best-accuracy checkpoint persisted as
/// `best.ckpt`. Aborts on a non-finite loss, keeping the last good
/// checkpoint on disk.
pub fn train(
    model: &Model,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainState> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("best.ckpt");
    let mut metrics_file = BufWriter::new(File::create(&metrics_path)?);

    let train_indices = manifest.indices_of(Split::Train);
    if train_indices.is_empty() {
        return Err(HxError::Dataset("empty training split".into()));
    }
    let channels = model.config().input_channels;
    let k = model.config().num_classes;
    let params = model.params();
    let mut adam = AdamState::new(&params);
    let num_batches = train_indices.len().div_ceil(cfg.batch_size);

    let mut state = TrainState {
        metrics: Vec::new(),
        best_accuracy: f64::NEG_INFINITY,
        best_epoch: 0,
        checkpoint_path: checkpoint_path.clone(),
        metrics_path: metrics_path.clone(),
    };

    for epoch in 0..cfg.total_epochs {
        // deterministic shuffle per (seed, epoch)
        let mut order = train_indices.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(0xD1CE ^ (epoch as u64) << 8);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = encode_batch(manifest, chunk, channels, Some((cfg.seed, epoch)))?;
            let logits = model.forward(&x)?;
            let loss = bce_loss(&logits, &one_hot(&labels, k)?)?;
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(HxError::Training(format!(
                    "non-finite loss at epoch {epoch} batch {b}; last good checkpoint kept at {}",
                    checkpoint_path.display()
                )));
            }
            epoch_loss += loss_val * chunk.len() as f64;
            let lv = logits.to_vec();
            for (r, &label) in labels.iter().enumerate() {
                if argmax(&lv[r * k..][..k]) == label {
                    correct += 1;
                }
            }
            model.zero_grad();
            loss.backward()?;
            let lr = lr_at(epoch as f64 + b as f64 / num_batches as f64, cfg);
            adam_step(&params, &mut adam, lr, cfg);
        }

        let train_loss = epoch_loss / train_indices.len() as f64;
        let train_acc = correct as f64 / train_indices.len() as f64;
        let (test_loss, test_acc) = evaluate_split(model, manifest, Split::Test, cfg.batch_size)?;
        let lr_epoch = lr_at(epoch as f64, cfg);
        for m in [
            EpochMetrics {
                epoch,
                split: "train".into(),
                loss: train_loss,
                accuracy: train_acc,
                lr: lr_epoch,
            },
            EpochMetrics {
                epoch,
                split: "test".into(),
                loss: test_loss,
                accuracy: test_acc,
                lr: lr_epoch,
            },
        ] {
            writeln!(metrics_file, "{}", serde_json::to_string(&m).expect("serializable"))?;
            state.metrics.push(m);
        }
        metrics_file.flush()?;

        if test_acc > state.best_accuracy {
            state.best_accuracy = test_acc;
            state.best_epoch = epoch;
            model.save(&checkpoint_path)?;
        }
        if let Some(target) = cfg.stop_at_accuracy {
            if test_acc >= target {
                break;
            }
        }
    }
    Ok(state)
}
