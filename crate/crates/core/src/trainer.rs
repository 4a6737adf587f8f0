//! Optimization loop: Adam with linear warmup and cosine decay, per-epoch
//! metrics, and checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::SscqConfig;
use crate::data::{augmentation_rng, derive_seed, epoch_batches, two_view_batch, AugmentationPolicy, UnlabeledView};
use crate::encoder::{init_encoder, EncoderParams};
use crate::error::{ensure, Error, Result};
use crate::losses::{total_loss, LossValues, TwoViewBatch};
use crate::numerics::RealMatrix;
use crate::quantizer::CodebookSet;

pub const ENCODER_FILE: &str = "encoder.enc";
pub const BOOKS_FILE: &str = "books.pq";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            base_lr: 5e-4,
            weight_decay: 1e-5,
            warmup_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.base_lr > 0.0 && self.base_lr.is_finite(),
            Config,
            "base_lr must be positive, got {}",
            self.base_lr
        );
        ensure!(
            self.epochs == 0 || self.warmup_epochs < self.epochs,
            Config,
            "warmup_epochs ({}) must be below epochs ({})",
            self.warmup_epochs,
            self.epochs
        );
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "adam betas must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, Config, "adam eps must be positive");
        ensure!(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            Config,
            "weight_decay must be non-negative"
        );
        Ok(())
    }
}

/// Learning rate for optimizer step `step` (0-based).
pub fn lr_at(step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    if step < warmup {
        return config.base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return config.base_lr;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    config.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam moments for a list of named parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    names: Vec<String>,
    m: Vec<RealMatrix>,
    v: Vec<RealMatrix>,
    step: u64,
}

impl OptimizerState {
    pub fn new(slots: &[(String, (usize, usize))]) -> Self {
        Self {
            names: slots.iter().map(|(n, _)| n.clone()).collect(),
            m: slots.iter().map(|(_, (r, c))| RealMatrix::zeros(*r, *c)).collect(),
            v: slots.iter().map(|(_, (r, c))| RealMatrix::zeros(*r, *c)).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn slot_names(&self) -> &[String] {
        &self.names
    }

    pub fn first_moment(&self, slot: usize) -> &RealMatrix {
        &self.m[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &RealMatrix {
        &self.v[slot]
    }
}

/// One bias-corrected Adam update with decoupled weight decay:
/// `p -= lr · (m̂ / (√v̂ + ε) + wd · p)`.
///
/// Every gradient is checked before anything is modified, so a failed step
/// leaves parameters and moments untouched.
pub fn adam_step(
    params: &mut [&mut RealMatrix],
    grads: &[RealMatrix],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && grads.len() == state.m.len(),
        Dimension,
        "{} parameters, {} gradients, {} optimizer slots",
        params.len(),
        grads.len(),
        state.m.len()
    );
    for (slot, (p, g)) in params.iter().zip(grads).enumerate() {
        ensure!(
            p.shape() == g.shape() && g.shape() == state.m[slot].shape(),
            Dimension,
            "slot {} ({}): parameter {:?}, gradient {:?}, moments {:?}",
            slot,
            state.names[slot],
            p.shape(),
            g.shape(),
            state.m[slot].shape()
        );
        if let Some(pos) = g.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter slot {slot} ({}) at entry {pos}: {}",
                state.names[slot],
                g.as_slice()[pos]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[slot].as_mut_slice();
        let v = state.v[slot].as_mut_slice();
        for (((p, &g), m), v) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * *p);
        }
    }
    Ok(())
}

/// Encoder and codebooks trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub books: CodebookSet,
}

impl Model {
    /// Fresh parameters drawn from `config.train.seed`.
    pub fn init(config: &SscqConfig) -> Result<Self> {
        let sub_dim = config.quantizer.sub_dim(config.encoder.embedding_dim)?;
        let seed = config.train.seed;
        Ok(Self {
            encoder: init_encoder(&config.encoder, derive_seed(seed, 0x454e_43))?,
            books: CodebookSet::random(
                config.quantizer.num_books,
                config.quantizer.codewords,
                sub_dim,
                derive_seed(seed, 0x424f_4f4b),
            )?,
        })
    }

    /// Slot names and shapes in the order used by [`Model::params_mut`].
    pub fn slots(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.layer{i}.weight"), l.weight.shape()));
            out.push((format!("encoder.layer{i}.bias"), l.bias.shape()));
        }
        for (m, b) in self.books.books().iter().enumerate() {
            out.push((format!("codebook{m}"), b.shape()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut RealMatrix> {
        let mut out: Vec<&mut RealMatrix> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend(self.books.books_mut().iter_mut());
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.encoder.save(&dir.join(ENCODER_FILE))?;
        self.books.save(&dir.join(BOOKS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let encoder = EncoderParams::load(&dir.join(ENCODER_FILE))?;
        let books = CodebookSet::load(&dir.join(BOOKS_FILE))?;
        ensure!(
            encoder.embedding_dim() == books.dim(),
            Config,
            "{}: encoder emits {} dims but codebooks cover {}",
            dir.display(),
            encoder.embedding_dim(),
            books.dim()
        );
        Ok(Self { encoder, books })
    }
}

/// Manifest written next to the final checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub epochs_completed: usize,
    pub steps: usize,
    pub config_hash: String,
    pub config: SscqConfig,
}

impl CheckpointManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest is representable as TOML");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Loads a checkpoint directory written by [`train`].
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest = CheckpointManifest::load(&dir.join(MANIFEST_FILE))?;
    let model = Model::load(dir)?;
    ensure!(
        model.encoder.config() == manifest.config.encoder,
        Config,
        "{}: encoder shape disagrees with its manifest",
        dir.display()
    );
    Ok((model, manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_icz")]
    pub icz: f64,
    #[serde(rename = "L_icf")]
    pub icf: f64,
    #[serde(rename = "L_pn")]
    pub pn: f64,
    #[serde(rename = "L_cd")]
    pub cd: f64,
    #[serde(rename = "L_cc")]
    pub cc: f64,
    pub total: f64,
}

impl EpochMetrics {
    fn new(epoch: usize, step: usize, lr: f64, v: &LossValues) -> Self {
        Self {
            epoch,
            step,
            lr,
            icz: v.icz,
            icf: v.icf,
            pn: v.pn,
            cd: v.cd,
            cc: v.cc,
            total: v.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Batch-mean loss terms per epoch.
    pub history: Vec<EpochMetrics>,
    pub steps: usize,
}

struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(["epoch", "step", "lr", "L_icz", "L_icf", "L_pn", "L_cd", "L_cc", "total"])
            .map_err(|e| csv_error(&path, e))?;
        writer.flush().map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, writer })
    }

    fn append(&mut self, row: &EpochMetrics) -> Result<()> {
        self.writer
            .write_record(&[
                row.epoch.to_string(),
                row.step.to_string(),
                row.lr.to_string(),
                row.icz.to_string(),
                row.icf.to_string(),
                row.pn.to_string(),
                row.cd.to_string(),
                row.cc.to_string(),
                row.total.to_string(),
            ])
            .map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

/// Trains encoder and codebooks on `view` from a fresh initialization.
///
/// When `out_dir` is given it receives `metrics.csv`, the final checkpoint
/// and its manifest, plus `checkpoints/epoch-NNNN/` every
/// `checkpoint_every` epochs.
pub fn train(view: &UnlabeledView<'_>, config: &SscqConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::init(config)?;
    train_from(model, view, config, out_dir)
}

/// Like [`train`] but starting from the given parameters.
pub fn train_from(
    mut model: Model,
    view: &UnlabeledView<'_>,
    config: &SscqConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    ensure!(
        view.input_dim() == model.encoder.input_dim(),
        Dimension,
        "data has {} features, encoder expects {}",
        view.input_dim(),
        model.encoder.input_dim()
    );
    let steps_per_epoch = view.len() / tc.batch_size;
    ensure!(
        tc.epochs == 0 || steps_per_epoch > 0,
        Config,
        "{} training items cannot fill one batch of {}",
        view.len(),
        tc.batch_size
    );
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsLog::create(dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let policy = if tc.epochs == 0 {
        AugmentationPolicy::identity(view.input_dim())
    } else {
        AugmentationPolicy::from_config(&config.augment, view)?
    };
    let mut state = OptimizerState::new(&model.slots());
    let mut history = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        let mut sums = LossValues::default();
        let mut lr = 0.0;
        let batches = epoch_batches(view.len(), tc.batch_size, tc.seed, epoch as u64);
        for batch_idx in &batches {
            let mut rng = augmentation_rng(tc.seed, step as u64);
            let inputs = two_view_batch(view, batch_idx, &policy, &mut rng)?;
            let bundle = total_loss(
                &TwoViewBatch::new(inputs)?,
                &model.encoder,
                &model.books,
                &config.loss,
                config.quantizer.tau_sq,
            )?;
            ensure!(
                bundle.values.is_finite(),
                Numeric,
                "non-finite loss at epoch {} step {step}: {:?}",
                epoch + 1,
                bundle.values
            );
            let mut grads: Vec<RealMatrix> = Vec::new();
            for (w, b) in bundle.encoder_grads {
                grads.push(w);
                grads.push(b);
            }
            grads.extend(bundle.codebook_grads);
            lr = lr_at(step, steps_per_epoch, tc);
            adam_step(&mut model.params_mut(), &grads, &mut state, lr, tc)?;
            sums.accumulate(&bundle.values, 1.0 / batches.len() as f64);
            step += 1;
        }
        let row = EpochMetrics::new(epoch + 1, step, lr, &sums);
        log::info!(
            "epoch {:>4} step {:>6} lr {:.3e} total {:.5}",
            row.epoch,
            row.step,
            row.lr,
            row.total
        );
        if let Some(log) = log.as_mut() {
            log.append(&row)?;
        }
        history.push(row);
        if let Some(dir) = out_dir {
            if tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 {
                model.save(&dir.join("checkpoints").join(format!("epoch-{:04}", epoch + 1)))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        model.save(dir)?;
        CheckpointManifest {
            seed: tc.seed,
            epochs_completed: tc.epochs,
            steps: step,
            config_hash: config.hash(),
            config: config.clone(),
        }
        .save(&dir.join(MANIFEST_FILE))?;
    }
    Ok(TrainOutcome {
        model,
        history,
        steps: step,
    })
}
