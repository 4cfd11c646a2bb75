//! Minibatch SGD-with-momentum training of both encoders against the DCCA
//! loss, with the step-halving learning-rate schedule, a full-train-set CCA
//! refit after the last epoch, and DCCK checkpointing.
//!
//! The loss uses per-minibatch covariance estimates; the retrieval projections
//! come from a CCA refit over the complete training split in eval mode, since
//! minibatch covariances are too noisy to index against. Training is a single
//! deterministic thread: one seed fixes weight init and shuffling, and
//! therefore every loss value and artifact byte.

use crate::cca::{fit_cca, CcaModel};
use crate::datagen::{MultiViewDataset, Split, View};
use crate::dcca::dcca_loss;
use crate::encoders::{Encoder, EncoderConfig, InputShape, Mode};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::numerics::Matrix;
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Encoder architecture preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Two conv blocks (8 and 16 maps) + linear 1×1 projection + GAP.
    Desk,
    /// The full four-double-block architecture with h = 32.
    PaperTable1,
    /// Dense path for flat views.
    Mlp,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "desk" => Ok(Arch::Desk),
            "paper-table1" => Ok(Arch::PaperTable1),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::Range(format!("unknown arch '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Desk => "desk",
            Arch::PaperTable1 => "paper-table1",
            Arch::Mlp => "mlp",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Arch::Desk => 0,
            Arch::PaperTable1 => 1,
            Arch::Mlp => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Arch> {
        match tag {
            0 => Ok(Arch::Desk),
            1 => Ok(Arch::PaperTable1),
            2 => Ok(Arch::Mlp),
            t => Err(Error::Format(format!("unknown arch tag {t}"))),
        }
    }

    pub fn encoder_config(self, h: usize) -> EncoderConfig {
        match self {
            Arch::Desk => EncoderConfig::desk(h),
            Arch::PaperTable1 => EncoderConfig::paper_table1(),
            Arch::Mlp => EncoderConfig::mlp(64, h),
        }
    }
}

/// Training hyperparameters. Defaults: batch 100, lr 0.1 halved every 25
/// epochs, momentum 0.9.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub halve_every: usize,
    pub epochs: usize,
    pub eps: f64,
    pub seed: u64,
    pub h: usize,
    pub arch: Arch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            lr0: 0.1,
            momentum: 0.9,
            halve_every: 25,
            epochs: 100,
            eps: 1e-3,
            seed: 0,
            h: 8,
            arch: Arch::Desk,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < self.h + 1 {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} must be at least h + 1 = {}",
                self.batch_size,
                self.h + 1
            )));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.halve_every == 0 {
            return Err(Error::InvalidConfig("halve_every must be at least 1".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if self.arch == Arch::PaperTable1 && self.h != 32 {
            return Err(Error::InvalidConfig(format!(
                "paper-table1 produces h = 32, config says h = {}",
                self.h
            )));
        }
        Ok(())
    }

    /// `lr0 · 0.5^⌊epoch / halve_every⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_corr: f64,
    pub lr: f64,
}

/// Everything needed to embed and retrieve: both encoders, the refit CCA
/// model, the config that produced them, and the loss history.
#[derive(Debug)]
pub struct Checkpoint {
    pub encoder_x: Encoder,
    pub encoder_y: Encoder,
    pub cca: CcaModel,
    pub config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Momentum SGD step: `v ← m·v − lr·g`, `θ ← θ + v`.
/// With `m = 0` this is plain gradient descent.
pub fn momentum_step(params: &mut [f64], velocity: &mut [f64], grads: &[f64], lr: f64, m: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads.iter()) {
        *v = m * *v - lr * g;
        *p += *v;
    }
}

/// Eval-mode features over selected samples, chunked to bound memory.
pub fn split_features(
    enc: &Encoder,
    ds: &MultiViewDataset,
    indices: &[usize],
    view: View,
) -> Result<Matrix> {
    let h = enc.h();
    let mut out = Matrix::zeros(indices.len(), h);
    let chunk = 256;
    let mut row = 0;
    for block in indices.chunks(chunk) {
        let tensor = ds.gather(view, block);
        let feats = enc.forward_eval(&tensor)?;
        for i in 0..feats.rows() {
            out.row_mut(row).copy_from_slice(feats.row(i));
            row += 1;
        }
    }
    Ok(out)
}

/// Fits a CCA on eval-mode features of `split` and returns the total
/// correlation. Per-epoch validation metric.
fn correlation_on_split(
    enc_x: &Encoder,
    enc_y: &Encoder,
    ds: &MultiViewDataset,
    split: Split,
    eps: f64,
) -> Result<f64> {
    let indices = ds.split_indices(split);
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let fx = split_features(enc_x, ds, &indices, View::X)?;
    let gy = split_features(enc_y, ds, &indices, View::Y)?;
    let model = fit_cca(&fx, &gy, eps)?;
    Ok(model.corrs.iter().sum())
}

/// Trains both encoders with momentum SGD on shuffled minibatches (the last
/// incomplete batch of each epoch is dropped), then refits the CCA model on
/// the full training split.
pub fn train(ds: &MultiViewDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with_logger(ds, cfg, |_| {})
}

/// [`train`] with a per-epoch callback (progress logging).
pub fn train_with_logger(
    ds: &MultiViewDataset,
    cfg: &TrainConfig,
    mut logger: impl FnMut(&EpochStats),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let train_indices = ds.split_indices(Split::Train);
    let valid_indices = ds.split_indices(Split::Valid);
    if train_indices.len() < cfg.batch_size {
        return Err(Error::InsufficientSamples {
            needed: cfg.batch_size,
            got: train_indices.len(),
        });
    }
    if cfg.epochs > 0 && valid_indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // The post-training refit needs a full-rank covariance.
    if train_indices.len() < cfg.h + 1 {
        return Err(Error::InsufficientSamples { needed: cfg.h + 1, got: train_indices.len() });
    }

    let shape_x = InputShape::from_dims(&ds.shape_x)?;
    let shape_y = InputShape::from_dims(&ds.shape_y)?;
    let enc_cfg = cfg.arch.encoder_config(cfg.h);
    let mut enc_x = Encoder::init(&enc_cfg, shape_x, cfg.h, Rng::stream(cfg.seed, 1).next_u64())?;
    let mut enc_y = Encoder::init(&enc_cfg, shape_y, cfg.h, Rng::stream(cfg.seed, 2).next_u64())?;

    let mut vel_x: Vec<Vec<f64>> =
        enc_x.param_slices_mut().iter().map(|s| vec![0.0; s.len()]).collect();
    let mut vel_y: Vec<Vec<f64>> =
        enc_y.param_slices_mut().iter().map(|s| vec![0.0; s.len()]).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        // Counter-based shuffle stream: order depends only on (seed, epoch).
        let mut order = train_indices.clone();
        Rng::stream(cfg.seed, 1000 + epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
            let bx = ds.gather(View::X, chunk);
            let by = ds.gather(View::Y, chunk);
            let (fx, cache_x) = enc_x.forward(&bx, Mode::Train)?;
            let (gy, cache_y) = enc_y.forward(&by, Mode::Train)?;
            let res = dcca_loss(&fx, &gy, cfg.eps)?;
            if !res.loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_idx });
            }
            let grads_x = enc_x.backward(&cache_x, &res.grad_fx)?;
            let grads_y = enc_y.backward(&cache_y, &res.grad_gy)?;

            {
                let mut params = enc_x.param_slices_mut();
                for ((p, v), g) in params.iter_mut().zip(vel_x.iter_mut()).zip(grads_x.slices()) {
                    momentum_step(p, v, g, lr, cfg.momentum);
                }
            }
            enc_x.bump_version();
            {
                let mut params = enc_y.param_slices_mut();
                for ((p, v), g) in params.iter_mut().zip(vel_y.iter_mut()).zip(grads_y.slices()) {
                    momentum_step(p, v, g, lr, cfg.momentum);
                }
            }
            enc_y.bump_version();

            loss_sum += res.loss;
            batches += 1;
        }

        let mean_loss = if batches > 0 { loss_sum / batches as f64 } else { 0.0 };
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        let val_corr = correlation_on_split(&enc_x, &enc_y, ds, Split::Valid, cfg.eps)?;
        let stats = EpochStats { epoch, mean_loss, val_corr, lr };
        logger(&stats);
        history.push(stats);
    }

    // Retrieval projections come from a refit on the full training split.
    let fx = split_features(&enc_x, ds, &train_indices, View::X)?;
    let gy = split_features(&enc_y, ds, &train_indices, View::Y)?;
    let cca = fit_cca(&fx, &gy, cfg.eps)?;

    Ok(Checkpoint {
        encoder_x: enc_x,
        encoder_y: enc_y,
        cca,
        config: cfg.clone(),
        epoch: cfg.epochs,
        history,
    })
}

/// Total correlation of eval-mode features under a CCA fit on `split`.
pub fn evaluate_correlation(ckpt: &Checkpoint, ds: &MultiViewDataset, split: Split) -> Result<f64> {
    correlation_on_split(&ckpt.encoder_x, &ckpt.encoder_y, ds, split, ckpt.config.eps)
}

// ── DCCK checkpoint format ──────────────────────────────────────────

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ByteWriter::new();
        out.put_bytes(CHECKPOINT_MAGIC);
        out.put_u16(CHECKPOINT_VERSION);

        let mut enc_x = ByteWriter::new();
        self.encoder_x.write_to(&mut enc_x);
        out.put_section(enc_x.as_slice());

        let mut enc_y = ByteWriter::new();
        self.encoder_y.write_to(&mut enc_y);
        out.put_section(enc_y.as_slice());

        let mut cca = ByteWriter::new();
        self.cca.write_to(&mut cca);
        out.put_section(cca.as_slice());

        let mut cfg = ByteWriter::new();
        cfg.put_u32(self.config.batch_size as u32);
        cfg.put_f64(self.config.lr0);
        cfg.put_f64(self.config.momentum);
        cfg.put_u32(self.config.halve_every as u32);
        cfg.put_u32(self.config.epochs as u32);
        cfg.put_f64(self.config.eps);
        cfg.put_u64(self.config.seed);
        cfg.put_u32(self.config.h as u32);
        cfg.put_u8(self.config.arch.tag());
        cfg.put_u32(self.epoch as u32);
        out.put_section(cfg.as_slice());

        let mut hist = ByteWriter::new();
        hist.put_u32(self.history.len() as u32);
        for e in &self.history {
            hist.put_u32(e.epoch as u32);
            hist.put_f64(e.mean_loss);
            hist.put_f64(e.val_corr);
            hist.put_f64(e.lr);
        }
        out.put_section(hist.as_slice());
        out.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC, "checkpoint")?;
        r.expect_version(CHECKPOINT_VERSION, "checkpoint")?;

        let enc_x_bytes = r.take_section()?;
        let encoder_x = Encoder::read_from(&mut ByteReader::new(enc_x_bytes))?;
        let enc_y_bytes = r.take_section()?;
        let encoder_y = Encoder::read_from(&mut ByteReader::new(enc_y_bytes))?;
        let cca_bytes = r.take_section()?;
        let cca = CcaModel::read_from(&mut ByteReader::new(cca_bytes))?;

        let cfg_bytes = r.take_section()?;
        let mut cr = ByteReader::new(cfg_bytes);
        let config = TrainConfig {
            batch_size: cr.take_u32()? as usize,
            lr0: cr.take_f64()?,
            momentum: cr.take_f64()?,
            halve_every: cr.take_u32()? as usize,
            epochs: cr.take_u32()? as usize,
            eps: cr.take_f64()?,
            seed: cr.take_u64()?,
            h: cr.take_u32()? as usize,
            arch: Arch::from_tag(cr.take_u8()?)?,
        };
        let epoch = cr.take_u32()? as usize;

        let hist_bytes = r.take_section()?;
        let mut hr = ByteReader::new(hist_bytes);
        let n = hr.take_u32()? as usize;
        let mut history = Vec::with_capacity(n);
        for _ in 0..n {
            history.push(EpochStats {
                epoch: hr.take_u32()? as usize,
                mean_loss: hr.take_f64()?,
                val_corr: hr.take_f64()?,
                lr: hr.take_f64()?,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                r.remaining()
            )));
        }

        Ok(Checkpoint { encoder_x, encoder_y, cca, config, epoch, history })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}
