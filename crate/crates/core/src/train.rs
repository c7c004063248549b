//! Self-supervised pre-training: schedules, the seeded training loop,
//! metrics and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cloud::{CloudError, PointCloud};
use crate::data::{build_dataset, resample, substream, DatasetSpec, Stream};
use crate::disentangle::{disentangle, jitter_count_variant, perturb_with, DisentangleError, DisentangledCloud, Manner, NoiseOptions, PerturbedCloud};
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossError, LossTerm};
use crate::model::{CpNet, CpNetConfig, ModelError, Pass};
use crate::tensor::{
    adam_step, grad_check, read_container, write_container, AdamHyper, GradCheckOptions, GradCheckReport, ParamStore, Tape,
    TensorError,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {breakdown:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        breakdown: LossBreakdown,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Disentangle(#[from] DisentangleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::VersionMismatch { found, expected } => TrainError::VersionMismatch { found, expected },
            TensorError::Io(e) => TrainError::Io(e),
            other => TrainError::Tensor(other),
        }
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// How the assistant branch's input is produced from each cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub manner: Manner,
    pub std: f64,
    pub clip: Option<f64>,
    /// Jitter exactly this many top-ranked points instead of following the
    /// manner.
    pub jitter_count: Option<usize>,
    /// Neighbourhood size of the graph used to score points.
    pub k_graph: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            manner: Manner::H,
            std: 0.02,
            clip: None,
            jitter_count: None,
            k_graph: 16,
        }
    }
}

impl AugmentConfig {
    pub fn apply(&self, d: &DisentangledCloud, seed: u64) -> Result<PerturbedCloud> {
        Ok(match self.jitter_count {
            Some(count) => jitter_count_variant(d, count, self.std, seed)?,
            None => perturb_with(
                d,
                self.manner,
                &NoiseOptions {
                    std: self.std,
                    clip: self.clip,
                },
                seed,
            )?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    pub bn_momentum0: f64,
    pub bn_decay: f64,
    pub bn_period: usize,
    pub bn_momentum_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub model: CpNetConfig,
}

impl TrainConfig {
    pub fn new(model: CpNetConfig, loss: LossConfig) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            lr0: 0.001,
            lr_decay: 0.7,
            lr_period: 20,
            bn_momentum0: 0.9,
            bn_decay: 0.5,
            bn_period: 20,
            bn_momentum_min: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss,
            augment: AugmentConfig::default(),
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 = {}", self.lr0));
        }
        for (name, v) in [("lr_decay", self.lr_decay), ("bn_decay", self.bn_decay), ("bn_momentum0", self.bn_momentum0)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if !(self.bn_momentum_min > 0.0 && self.bn_momentum_min <= self.bn_momentum0) {
            return bad(format!("bn_momentum_min = {}", self.bn_momentum_min));
        }
        if self.lr_period == 0 || self.bn_period == 0 {
            return bad("schedule periods must be at least 1 epoch".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyper-parameters".into());
        }
        if !(self.augment.std >= 0.0 && self.augment.std.is_finite()) {
            return bad(format!("augment std = {}", self.augment.std));
        }
        if self.augment.k_graph == 0 {
            return bad("k_graph must be at least 1".into());
        }
        self.loss.validate()?;
        self.model.validate()?;
        if self.loss.is_enabled(LossTerm::Normal) && !self.model.normal_head {
            return bad("the normal loss needs the normal head".into());
        }
        Ok(())
    }

    /// Hash of everything except the epoch budget, so a run can be resumed
    /// with a longer schedule.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `lr0 · decay^⌊epoch / period⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_period) as i32)
}

/// Weight of the current batch statistics in the running BN buffers:
/// `momentum0 · decay^⌊epoch / period⌋`, floored at `bn_momentum_min`.
pub fn bn_momentum_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    (cfg.bn_momentum0 * cfg.bn_decay.powi((epoch / cfg.bn_period) as i32)).max(cfg.bn_momentum_min)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub cg: f64,
    pub cl: f64,
    pub cl2g: f64,
    pub recon: f64,
    pub normal: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(epoch: usize, step: usize, lr: f64, b: &LossBreakdown) -> Self {
        StepRecord {
            epoch,
            step,
            lr,
            cg: b.cg,
            cl: b.cl,
            cl2g: b.cl2g,
            recon: b.recon,
            normal: b.normal,
            total: b.total,
        }
    }
}

/// Per-epoch means of the step records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub bn_momentum: f64,
    pub cg: f64,
    pub cl: f64,
    pub cl2g: f64,
    pub recon: f64,
    pub normal: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl History {
    pub fn epoch_totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }
}

/// Streams step records as JSON lines and epoch summaries as CSV.
pub struct MetricsWriter {
    steps: BufWriter<File>,
    epochs: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(steps_path: &Path, epochs_path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            steps: BufWriter::new(File::create(steps_path)?),
            epochs: csv::Writer::from_path(epochs_path).map_err(csv_err)?,
        })
    }

    pub fn write_step(&mut self, r: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.steps, r).map_err(|e| TrainError::Io(e.into()))?;
        self.steps.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_epoch(&mut self, s: &EpochSummary) -> Result<()> {
        self.epochs.serialize(s).map_err(csv_err)?;
        Ok(())
    }

    pub fn write_history(&mut self, h: &History) -> Result<()> {
        for r in &h.steps {
            self.write_step(r)?;
        }
        for s in &h.epochs {
            self.write_epoch(s)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.steps.flush()?;
        self.epochs.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> TrainError {
    TrainError::Io(std::io::Error::other(e))
}

/// Parameters, optimizer state and progress of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Weights, Adam moments and BN buffers.
    pub store: ParamStore,
    /// Completed epochs.
    pub epoch: usize,
    pub fingerprint: String,
    pub config: TrainConfig,
    pub history: History,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    checkpoint_version: u32,
    epoch: usize,
    fingerprint: String,
    config: TrainConfig,
    history: History,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        checkpoint_version: CHECKPOINT_VERSION,
        epoch: ckpt.epoch,
        fingerprint: ckpt.fingerprint.clone(),
        config: ckpt.config.clone(),
        history: ckpt.history.clone(),
    };
    let meta = serde_json::to_value(meta).map_err(|e| TrainError::Format(e.to_string()))?;
    write_container(path, &ckpt.store.to_container(meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (store, meta) = ParamStore::from_container(read_container(path)?)?;
    let found = meta.get("checkpoint_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| TrainError::Format(e.to_string()))?;
    Ok(Checkpoint {
        store,
        epoch: meta.epoch,
        fingerprint: meta.fingerprint,
        config: meta.config,
        history: meta.history,
    })
}

/// The training loop, advanced one epoch at a time.
///
/// Every random choice is drawn from a sub-stream of the run seed indexed
/// by epoch and cloud, so the state after `e` epochs is fully described by
/// the parameter store and `e`; resuming from a checkpoint replays the
/// uninterrupted run exactly.
pub struct Trainer {
    cfg: TrainConfig,
    net: CpNet,
    store: ParamStore,
    clouds: Vec<PointCloud>,
    parts: Vec<DisentangledCloud>,
    epoch: usize,
    history: History,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, clouds: &[PointCloud]) -> Result<Self> {
        cfg.validate()?;
        let net = CpNet::new(cfg.model.clone())?;
        let store = net.init_params(substream(cfg.seed, Stream::Init, 0, 0))?;
        Self::assemble(cfg, net, store, clouds, 0, History::default())
    }

    /// Continues a run. The configuration may differ from the checkpoint's
    /// only in its epoch budget.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, clouds: &[PointCloud]) -> Result<Self> {
        cfg.validate()?;
        if cfg.fingerprint() != ckpt.fingerprint {
            return Err(TrainError::Config("checkpoint was written by a different configuration".into()));
        }
        let net = CpNet::new(cfg.model.clone())?;
        Self::assemble(cfg, net, ckpt.store, clouds, ckpt.epoch, ckpt.history)
    }

    fn assemble(
        cfg: TrainConfig,
        net: CpNet,
        store: ParamStore,
        clouds: &[PointCloud],
        epoch: usize,
        history: History,
    ) -> Result<Self> {
        if clouds.is_empty() {
            return Err(TrainError::Config("empty dataset".into()));
        }
        if cfg.loss.is_enabled(LossTerm::Cl2g) && cfg.batch_size == 1 {
            log::warn!("cl2g is enabled with batch_size = 1; the term is identically zero");
        }
        if cfg.loss.is_enabled(LossTerm::Normal) && clouds.iter().any(|c| c.normals().is_none()) {
            return Err(TrainError::Config("the normal loss is enabled but some clouds have no normals".into()));
        }
        let n = clouds[0].len();
        if clouds.iter().any(|c| c.len() != n) {
            log::info!("resampling every cloud to {n} points");
        }
        let clouds = clouds.iter().map(|c| resample(c, n)).collect::<Result<Vec<_>, _>>()?;
        let parts = if cfg.loss.needs_assistant() {
            clouds
                .iter()
                .map(|c| disentangle(c, cfg.augment.k_graph))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        Ok(Trainer {
            cfg,
            net,
            store,
            clouds,
            parts,
            epoch,
            history,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &CpNet {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            store: self.store.clone(),
            epoch: self.epoch,
            fingerprint: self.cfg.fingerprint(),
            config: self.cfg.clone(),
            history: self.history.clone(),
        }
    }

    pub fn into_parts(self) -> (ParamStore, History) {
        (self.store, self.history)
    }

    /// One pass over the data in a seeded order. On a non-finite loss the
    /// offending step is appended to the history before the error returns.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.cfg);
        let momentum = bn_momentum_at(epoch, &self.cfg);
        let hyper = AdamHyper {
            lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.adam_eps,
        };
        let mut order: Vec<usize> = (0..self.clouds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(substream(self.cfg.seed, Stream::Shuffle, epoch as u64, 0)));

        let mut sums = LossBreakdown::default();
        let mut steps = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            let perturbed = if self.cfg.loss.needs_assistant() {
                batch
                    .iter()
                    .map(|&i| {
                        let seed = substream(self.cfg.seed, Stream::Noise, epoch as u64, i as u64);
                        self.cfg.augment.apply(&self.parts[i], seed)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let tape = Tape::new();
            let pass = Pass::train(&tape, &self.store);
            let mut outputs = Vec::with_capacity(batch.len());
            let forward = batch
                .iter()
                .enumerate()
                .try_for_each(|(j, &i)| {
                    let out = self.net.dual_forward(&pass, &self.clouds[i], perturbed.get(j))?;
                    outputs.push((out, &self.clouds[i]));
                    Ok::<_, TrainError>(())
                })
                .and_then(|()| Ok(total_loss(&tape, &outputs, &self.cfg.loss)?));
            let step = self.history.steps.len();
            let (loss, breakdown) = match forward {
                Ok(v) => v,
                // weights that already overflowed fail inside the forward
                // pass; report them like a loss that came out non-finite
                Err(e) if is_non_finite(&e) => {
                    let breakdown = LossBreakdown {
                        cg: f64::NAN,
                        cl: f64::NAN,
                        cl2g: f64::NAN,
                        recon: f64::NAN,
                        normal: f64::NAN,
                        total: f64::NAN,
                    };
                    self.history.steps.push(StepRecord::new(epoch, step, lr, &breakdown));
                    return Err(TrainError::NonFiniteLoss { epoch, step, breakdown });
                }
                Err(e) => return Err(e),
            };
            self.history.steps.push(StepRecord::new(epoch, step, lr, &breakdown));
            if !breakdown.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, breakdown });
            }
            let grads = tape.backward(loss)?.aligned(&self.store);
            let updates = tape.bn_updates().clone();
            drop(outputs);
            adam_step(&mut self.store, &grads, &hyper)?;
            self.store.apply_bn_updates(&updates, momentum);

            for t in LossTerm::ALL {
                *slot(&mut sums, t) += breakdown.get(t);
            }
            sums.total += breakdown.total;
            steps += 1;
        }
        let mean = |v: f64| v / steps as f64;
        let summary = EpochSummary {
            epoch,
            steps,
            lr,
            bn_momentum: momentum,
            cg: mean(sums.cg),
            cl: mean(sums.cl),
            cl2g: mean(sums.cl2g),
            recon: mean(sums.recon),
            normal: mean(sums.normal),
            total: mean(sums.total),
        };
        self.history.epochs.push(summary);
        self.epoch += 1;
        Ok(summary)
    }

    /// Runs the remaining epochs of the budget.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }
}

fn is_non_finite(e: &TrainError) -> bool {
    let tensor = match e {
        TrainError::Tensor(t) | TrainError::Model(ModelError::Tensor(t)) | TrainError::Loss(LossError::Tensor(t)) => t,
        _ => return false,
    };
    matches!(tensor, TensorError::NonFinite { .. })
}

fn slot(b: &mut LossBreakdown, t: LossTerm) -> &mut f64 {
    match t {
        LossTerm::Cg => &mut b.cg,
        LossTerm::Cl => &mut b.cl,
        LossTerm::Cl2g => &mut b.cl2g,
        LossTerm::Recon => &mut b.recon,
        LossTerm::Normal => &mut b.normal,
    }
}

/// Trains from scratch for `cfg.epochs` epochs. Zero epochs returns the
/// initial parameters and an empty history.
pub fn pretrain(clouds: &[PointCloud], cfg: &TrainConfig) -> Result<(ParamStore, History)> {
    let mut t = Trainer::new(cfg.clone(), clouds)?;
    t.run()?;
    Ok(t.into_parts())
}

/// A small segmentation network with every loss term enabled, used to check
/// gradients end to end.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSetup {
    pub n_points: usize,
    pub batch: usize,
    pub seed: u64,
    /// Number of sampled parameter entries; `None` checks all of them.
    pub sample: Option<usize>,
    pub h: f64,
    /// Relative-error floor as a fraction of the loss; see
    /// [`GradCheckOptions::floor`].
    pub floor: f64,
    /// Narrower steps tried on entries that disagree by more than 1e-5.
    pub refine_steps: u32,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            n_points: 64,
            batch: 2,
            seed: 0,
            sample: None,
            h: 1e-5,
            floor: 1e-6,
            refine_steps: 2,
        }
    }
}

impl GradCheckSetup {
    pub fn model(&self) -> CpNetConfig {
        CpNetConfig {
            channels_per_level: vec![8, 12, 16, 16],
            head_widths: vec![6; 4],
            k_neighbors: 8,
            weight_net_hidden: 8,
            fold_hidden: 16,
            normal_hidden: 16,
            ..CpNetConfig::segmentation(self.n_points)
        }
    }
}

/// Central-difference check of the dual-branch total loss over a batch of
/// perturbed clouds.
pub fn gradcheck_total_loss(setup: &GradCheckSetup) -> Result<GradCheckReport> {
    if setup.batch == 0 {
        return Err(TrainError::Config("batch must be at least 1".into()));
    }
    let per_kind = setup.batch.div_ceil(3);
    let mut clouds = build_dataset(&DatasetSpec::shape_mix(per_kind, setup.n_points, setup.seed))?.clouds;
    // interleave the kinds so small batches mix shapes
    clouds = (0..per_kind).flat_map(|i| (0..3).map(move |k| k * per_kind + i)).map(|i| clouds[i].clone()).collect();
    clouds.truncate(setup.batch);
    let augment = AugmentConfig::default();
    let perturbed = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| augment.apply(&disentangle(c, augment.k_graph)?, substream(setup.seed, Stream::Noise, 0, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let net = CpNet::new(setup.model())?;
    let mut store = net.init_params(substream(setup.seed, Stream::Init, 0, 0))?;
    // Zero biases put some max-pool and ReLU kinks exactly at the
    // initialization; a small offset moves the check to a generic point.
    let mut rng = ChaCha8Rng::seed_from_u64(substream(setup.seed, Stream::Init, 1, 0));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.data_mut(id) {
            *v += rng.gen_range(-0.01..0.01);
        }
    }
    let loss_cfg = LossConfig::all();
    let f = |tape: &Tape, store: &ParamStore| {
        let pass = Pass::train(tape, store);
        let mut outs = Vec::with_capacity(clouds.len());
        for (c, p) in clouds.iter().zip(&perturbed) {
            let o = net
                .dual_forward(&pass, c, Some(p))
                .map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
            outs.push((o, c));
        }
        total_loss(tape, &outs, &loss_cfg)
            .map(|(v, _)| v)
            .map_err(|e| TensorError::InvalidArgument(e.to_string()))
    };
    let opts = GradCheckOptions {
        h: setup.h,
        sample: setup.sample,
        seed: setup.seed,
        floor: setup.floor,
        refine_above: 1e-5,
        refine_steps: setup.refine_steps,
    };
    Ok(grad_check(&store, f, &opts)?)
}
