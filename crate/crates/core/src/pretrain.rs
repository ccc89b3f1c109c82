//! Masked-autoencoder pretraining: patch sampling, block masking, sparse
//! reconstruction, masked L2 and the SGD loop with checkpoints and resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_patch, center_offset, patch_at, sample_patch, AugmentConfig, AugmentParams, Volume};
use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskGrid, RatioSpec, VoxelMask};
use crate::network::{
    build_network, load_checkpoint, save_checkpoint, Checkpoint, Network, NetworkConfig, RngState, TrainingMeta,
};
use crate::optim::{sgd_step, LrLaw, OptimizerState, SgdConfig};
use crate::tensor::{Scalar, Tensor5};

fn check_loss_inputs<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>, mask: &VoxelMask) -> Result<usize> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("masked_l2_loss", pred.shape(), target.shape()));
    }
    mask.check("masked_l2_loss", pred.shape().batch(), pred.shape().spatial())?;
    let count = mask.masked_count() * pred.shape().channels();
    if count == 0 {
        return Err(Error::Invalid("masked_l2_loss: mask selects no voxels".into()));
    }
    Ok(count)
}

/// Mean squared error over masked voxels (all channels).
pub fn masked_l2_loss<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>, mask: &VoxelMask) -> Result<f64> {
    let count = check_loss_inputs(pred, target, mask)?;
    let shape = pred.shape();
    let mut sum = 0.0;
    for b in 0..shape.batch() {
        let m = mask.plane(b);
        for c in 0..shape.channels() {
            for ((p, t), &k) in pred.plane(b, c).iter().zip(target.plane(b, c)).zip(m) {
                if k {
                    let d = p.as_f64() - t.as_f64();
                    sum += d * d;
                }
            }
        }
    }
    Ok(sum / count as f64)
}

/// Gradient of [`masked_l2_loss`] with respect to `pred`; exactly zero on unmasked voxels.
pub fn masked_l2_loss_backward<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>, mask: &VoxelMask) -> Result<Tensor5<T>> {
    let count = check_loss_inputs(pred, target, mask)?;
    let shape = pred.shape();
    let scale = T::from_f64(2.0 / count as f64);
    let mut g = Tensor5::zeros(shape);
    for b in 0..shape.batch() {
        for c in 0..shape.channels() {
            let (p, t) = (pred.plane(b, c).to_vec(), target.plane(b, c).to_vec());
            let m = mask.plane(b).to_vec();
            for (i, gv) in g.plane_mut(b, c).iter_mut().enumerate() {
                if m[i] {
                    *gv = scale * (p[i] - t[i]);
                }
            }
        }
    }
    Ok(g)
}

/// Pretraining lengths offered as presets.
pub const STEP_GRID: [u64; 5] = [62_500, 125_000, 250_000, 500_000, 1_000_000];

pub const LOG_FILE: &str = "pretrain_log.tsv";
pub const LATEST_CHECKPOINT: &str = "checkpoint_latest.s3dc";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.s3dc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalePreset {
    #[serde(rename = "s3d-b")]
    S3dB,
    #[serde(rename = "s3d-l")]
    S3dL,
    Toy,
}

impl std::str::FromStr for ScalePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s3d-b" | "b" | "base" => Ok(ScalePreset::S3dB),
            "s3d-l" | "l" | "large" => Ok(ScalePreset::S3dL),
            "toy" => Ok(ScalePreset::Toy),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected s3d-b, s3d-l or toy)"))),
        }
    }
}

fn default_checkpoint_every() -> u64 {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub network: NetworkConfig,
    pub batch_size: usize,
    pub base_lr: f64,
    pub steps: u64,
    pub ratio: RatioSpec,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Resample to this spacing (mm) before z-scoring; `None` keeps native spacing.
    #[serde(default)]
    pub target_spacing: Option<[f64; 3]>,
}

impl PretrainConfig {
    pub fn preset(p: ScalePreset) -> Self {
        match p {
            ScalePreset::S3dB => PretrainConfig {
                network: NetworkConfig::paper_scale(),
                batch_size: 6,
                base_lr: 1e-2,
                steps: 250_000,
                ratio: RatioSpec::Static(0.75),
                sgd: SgdConfig::default(),
                augment: AugmentConfig::default(),
                seed: 0,
                checkpoint_every: 5000,
                target_spacing: Some([1.0; 3]),
            },
            ScalePreset::S3dL => PretrainConfig {
                batch_size: 48,
                base_lr: 3e-2,
                steps: 1_000_000,
                ..Self::preset(ScalePreset::S3dB)
            },
            ScalePreset::Toy => PretrainConfig {
                network: NetworkConfig::toy(),
                batch_size: 2,
                base_lr: 1e-2,
                steps: 2000,
                checkpoint_every: 500,
                target_spacing: None,
                ..Self::preset(ScalePreset::S3dB)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "steps ({}) and batch_size ({}) must be > 0",
                self.steps, self.batch_size
            )));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::Config(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        self.ratio.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.network.validate()?;
        if self.network.in_channels != 1 {
            return Err(Error::Config("pretraining feeds one modality at a time: network.in_channels must be 1".into()));
        }
        Ok(())
    }

    pub fn lr_law(&self) -> LrLaw {
        LrLaw::poly(self.base_lr, self.steps)
    }

    /// The mask grid lives at the bottleneck.
    pub fn grid_shape(&self) -> Result<[usize; 3]> {
        self.network.bottleneck()
    }
}

/// One batch of single-channel, z-scored, augmented patches.
pub fn sample_batch<R: Rng + ?Sized>(
    volumes: &[Volume],
    batch: usize,
    patch: [usize; 3],
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor5<f32>> {
    if volumes.is_empty() {
        return Err(Error::Invalid("pretraining dataset is empty".into()));
    }
    let mut items = Vec::with_capacity(batch);
    for _ in 0..batch {
        let v = &volumes[rng.random_range(0..volumes.len())];
        let c = rng.random_range(0..v.channels);
        let (p, _) = sample_patch(&v.select_channel(c), patch, rng);
        let params = AugmentParams::sample(augment, rng);
        items.push(augment_patch(&p, &params));
    }
    Tensor5::stack_batch(&items)
}

pub fn sample_masks<R: Rng + ?Sized>(batch: usize, grid: [usize; 3], ratio: RatioSpec, rng: &mut R) -> Result<Vec<MaskGrid>> {
    (0..batch).map(|_| sample_mask(grid, ratio, rng)).collect()
}

/// Masked reconstruction loss of `net` on `batch` under `masks`, with the
/// input-resolution voxel mask it was computed on.
pub fn reconstruction_loss<T: Scalar>(net: &Network<T>, batch: &Tensor5<T>, masks: &[MaskGrid]) -> Result<f64> {
    let pred = net.forward_sparse(batch, masks)?;
    let vm = VoxelMask::from_grids(masks, net.config().patch_size)?;
    masked_l2_loss(&pred, batch, &vm)
}

/// One optimization step: sample masks, sparse forward, masked L2, backward, SGD at `lr`.
pub fn pretrain_step<R: Rng + ?Sized>(
    net: &mut Network<f32>,
    opt: &mut OptimizerState<f32>,
    batch: &Tensor5<f32>,
    ratio: RatioSpec,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let grid = net.config().bottleneck()?;
    let masks = sample_masks(batch.shape().batch(), grid, ratio, rng)?;
    let tape = net.forward_sparse_tape(batch, &masks)?;
    let vm = tape.input_mask().expect("masked pass").clone();
    let loss = masked_l2_loss(tape.output(), batch, &vm)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("masked L2 = {loss} at lr {lr}"),
        });
    }
    let grad = masked_l2_loss_backward(tape.output(), batch, &vm)?;
    net.params_mut().zero_grads();
    net.backward(&tape, &grad)?;
    let frozen = net.frozen().clone();
    sgd_step(net.params_mut(), opt, lr, &frozen)?;
    Ok(loss)
}

/// Training state that can be checkpointed and resumed bit-exactly.
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub net: Network<f32>,
    pub opt: OptimizerState<f32>,
    pub rng: ChaCha8Rng,
    /// Completed steps.
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!("{}\t{:e}\t{:e}", self.step, self.lr, self.loss)
    }
}

impl Pretrainer {
    pub fn new(config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let mut net_cfg = config.network.clone();
        net_cfg.seed = config.seed;
        let net = build_network::<f32>(&net_cfg)?;
        let opt = OptimizerState::new(config.sgd, net.params());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Pretrainer {
            config: PretrainConfig {
                network: net_cfg,
                ..config
            },
            net,
            opt,
            rng,
            step: 0,
        })
    }

    /// Restores network, momentum, RNG and step count.
    pub fn resume(config: PretrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        if ckpt.config() != t.net.config() {
            return Err(Error::Checkpoint("checkpoint network config differs from the run config".into()));
        }
        ckpt.load_into(&mut t.net)?;
        let buffers = ckpt
            .optimizer_buffers()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        t.opt.buffers = buffers.to_vec();
        t.opt.check(t.net.params())?;
        t.rng = ckpt
            .meta()
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no RNG state".into()))?
            .restore()?;
        t.step = ckpt.meta().steps;
        if t.step > t.config.steps {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at step {} but the run has {} steps",
                t.step, t.config.steps
            )));
        }
        Ok(t)
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn train_step(&mut self, volumes: &[Volume]) -> Result<StepRecord> {
        let lr = self.config.lr_law().lr_at(self.step)?;
        let batch = sample_batch(
            volumes,
            self.config.batch_size,
            self.config.network.patch_size,
            &self.config.augment,
            &mut self.rng,
        )?;
        let loss = pretrain_step(&mut self.net, &mut self.opt, &batch, self.config.ratio, lr, &mut self.rng).map_err(
            |e| match e {
                Error::Diverged { detail, .. } => Error::Diverged {
                    step: self.step + 1,
                    detail,
                },
                other => other,
            },
        )?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            loss,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = TrainingMeta {
            steps: self.step,
            seed: self.config.seed,
            rng: Some(RngState::capture(&self.rng)),
            run_config: Some(serde_json::to_value(&self.config).map_err(|e| Error::Config(e.to_string()))?),
        };
        Checkpoint::from_network(&self.net, meta, Some(&self.opt))
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Losses of the steps run in this invocation.
    pub records: Vec<StepRecord>,
}

/// Keeps the log lines for steps `<= keep` so a resumed run appends cleanly.
fn truncate_log(path: &Path, keep: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| l.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= keep))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes, when `out_dir` holds a latest checkpoint and `resume`
/// is set) pretraining on z-scored `volumes`, writing the step log and
/// checkpoints into `out_dir`.
pub fn run_pretraining(
    config: &PretrainConfig,
    volumes: &[Volume],
    out_dir: &Path,
    resume: bool,
) -> Result<PretrainOutcome> {
    if volumes.is_empty() {
        return Err(Error::Invalid("pretraining dataset is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let latest = out_dir.join(LATEST_CHECKPOINT);
    let log_path = out_dir.join(LOG_FILE);
    let mut trainer = if resume && latest.exists() {
        let t = Pretrainer::resume(config.clone(), &load_checkpoint(&latest)?)?;
        truncate_log(&log_path, t.step)?;
        t
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
        }
        Pretrainer::new(config.clone())?
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut records = Vec::new();
    while !trainer.done() {
        let rec = trainer.train_step(volumes)?;
        writeln!(log, "{}", rec.log_line()).map_err(|e| Error::io(&log_path, e))?;
        records.push(rec);
        if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 && !trainer.done() {
            save_checkpoint(&trainer.checkpoint()?, &latest)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt = trainer.checkpoint()?;
    save_checkpoint(&ckpt, &latest)?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&ckpt, &final_path)?;
    Ok(PretrainOutcome {
        checkpoint: final_path,
        log: log_path,
        records,
    })
}

pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::format(path, format!("bad log line `{l}`"));
            let mut it = l.split('\t');
            let mut next = || it.next().ok_or_else(bad);
            Ok(StepRecord {
                step: next()?.parse().map_err(|_| bad())?,
                lr: next()?.parse().map_err(|_| bad())?,
                loss: next()?.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Held-out masked-reconstruction error of `net` and of the per-volume-mean
/// predictor on the same centre patches and masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconEval {
    pub model_mse: f64,
    pub mean_predictor_mse: f64,
}

pub fn evaluate_reconstruction(net: &Network<f32>, volumes: &[Volume], ratio: RatioSpec, seed: u64) -> Result<ReconEval> {
    let patch = net.config().patch_size;
    let grid = net.config().bottleneck()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, mut baseline, mut count) = (0.0, 0.0, 0usize);
    for v in volumes {
        for c in 0..v.channels {
            let vol = v.select_channel(c);
            let x = patch_at(&vol, patch, center_offset(vol.dims, patch));
            let masks = sample_masks(1, grid, ratio, &mut rng)?;
            let vm = VoxelMask::from_grids(&masks, patch)?;
            let pred = net.forward_sparse(&x, &masks)?;
            let n = vm.masked_count();
            model += masked_l2_loss(&pred, &x, &vm)? * n as f64;
            let mean = vol.data.iter().map(|&a| a as f64).sum::<f64>() / vol.data.len() as f64;
            let flat = Tensor5::full(x.shape(), mean as f32);
            baseline += masked_l2_loss(&flat, &x, &vm)? * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("no held-out volumes".into()));
    }
    Ok(ReconEval {
        model_mse: model / count as f64,
        mean_predictor_mse: baseline / count as f64,
    })
}
