//! Phased fine-tuning for segmentation: schedules, weight transfer, the
//! Dice + CE objective and validation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_labels, augment_patch, center_offset, crop_padded, patch_at, random_offset, AugmentConfig, AugmentParams, SegCase};
use crate::error::{Error, Result};
use crate::metrics::dice_masks;
use crate::network::{
    adapt_stem, build_network, transfer_weights, Checkpoint, Network, NetworkConfig, StemPolicy, TrainingMeta,
    TransferPolicy, TransferReport,
};
use crate::optim::{sgd_step, LrLaw, OptimizerState, SgdConfig};
use crate::params::Component;
use crate::tensor::{Scalar, Tensor5};

/// Smoothing term of the soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Equal-weight soft-Dice (foreground classes) plus voxel-wise cross-entropy.
///
/// `labels` holds one class id per voxel in batch, z, y, x order.
/// Returns the loss and its gradient with respect to `logits`.
pub fn dice_ce_loss<T: Scalar>(logits: &Tensor5<T>, labels: &[u8]) -> Result<(f64, Tensor5<T>)> {
    let shape = logits.shape();
    let (batch, classes, n) = (shape.batch(), shape.channels(), shape.spatial_len());
    if labels.len() != batch * n {
        return Err(Error::shape("dice_ce_loss labels", batch * n, labels.len()));
    }
    if classes < 2 {
        return Err(Error::Invalid("dice_ce_loss needs at least 2 classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
    }
    // Softmax probabilities, f64.
    let mut prob = vec![0.0f64; logits.len()];
    for b in 0..batch {
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..classes {
                mx = mx.max(logits.plane(b, c)[i].as_f64());
            }
            let mut z = 0.0;
            for c in 0..classes {
                let e = (logits.plane(b, c)[i].as_f64() - mx).exp();
                prob[(b * classes + c) * n + i] = e;
                z += e;
            }
            for c in 0..classes {
                prob[(b * classes + c) * n + i] /= z;
            }
        }
    }
    let total = (batch * n) as f64;
    // Cross-entropy.
    let mut ce = 0.0;
    for b in 0..batch {
        for i in 0..n {
            let l = labels[b * n + i] as usize;
            ce -= prob[(b * classes + l) * n + i].max(1e-300).ln();
        }
    }
    ce /= total;
    // Soft Dice over the batch per foreground class.
    let fg = classes - 1;
    let mut dice_sum = 0.0;
    let mut dice_terms = vec![(0.0f64, 0.0f64); classes];
    for (c, term) in dice_terms.iter_mut().enumerate().skip(1) {
        let (mut inter, mut denom) = (0.0, 0.0);
        for b in 0..batch {
            for i in 0..n {
                let p = prob[(b * classes + c) * n + i];
                let y = (labels[b * n + i] as usize == c) as u8 as f64;
                inter += p * y;
                denom += p + y;
            }
        }
        *term = (inter, denom);
        dice_sum += (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH);
    }
    let dice_loss = 1.0 - dice_sum / fg as f64;
    let loss = 0.5 * (dice_loss + ce);

    // d loss / d prob, then through the softmax Jacobian.
    let mut dprob = vec![0.0f64; logits.len()];
    for b in 0..batch {
        for i in 0..n {
            let l = labels[b * n + i] as usize;
            let idx = (b * classes + l) * n + i;
            dprob[idx] -= 0.5 / (total * prob[idx].max(1e-300));
        }
    }
    for (c, &(inter, denom)) in dice_terms.iter().enumerate().skip(1) {
        let den = denom + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        for b in 0..batch {
            for i in 0..n {
                let y = (labels[b * n + i] as usize == c) as u8 as f64;
                // d/dp of (2I + s)/(D + s) = (2y (D+s) - (2I+s)) / (D+s)^2
                let d = (2.0 * y * den - num) / (den * den);
                dprob[(b * classes + c) * n + i] -= 0.5 * d / fg as f64;
            }
        }
    }
    let mut grad = Tensor5::zeros(shape);
    for b in 0..batch {
        for i in 0..n {
            let mut dot = 0.0;
            for c in 0..classes {
                let idx = (b * classes + c) * n + i;
                dot += dprob[idx] * prob[idx];
            }
            for c in 0..classes {
                let idx = (b * classes + c) * n + i;
                grad.data_mut()[idx] = T::from_f64(prob[idx] * (dprob[idx] - dot));
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("dice_ce_loss"));
    }
    Ok((loss, grad))
}

/// Fine-tuning lengths offered as presets.
pub const STEP_GRID: [u64; 6] = [25_000, 37_500, 50_000, 75_000, 150_000, 275_000];
/// Training-set sizes of the low-data runs; `None` = all cases.
pub const LOW_DATA_GRID: [Option<usize>; 5] = [Some(10), Some(20), Some(30), Some(40), None];
pub const DEFAULT_WARMUP_STEPS: u64 = 12_500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    /// Random initialization everywhere.
    None,
    EncoderOnly,
    EncoderAndDecoder,
}

impl Transfer {
    pub fn policy(&self) -> Option<TransferPolicy> {
        match self {
            Transfer::None => None,
            Transfer::EncoderOnly => Some(TransferPolicy::EncoderOnly),
            Transfer::EncoderAndDecoder => Some(TransferPolicy::EncoderAndDecoder),
        }
    }
}

/// One row of the schedule space: what is transferred, which warm-ups run,
/// whether the encoder stays frozen and the peak learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub transfer: Transfer,
    pub decoder_warmup: bool,
    pub full_warmup: bool,
    #[serde(default)]
    pub freeze_encoder: bool,
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
}

fn default_warmup() -> u64 {
    DEFAULT_WARMUP_STEPS
}

impl ScheduleSpec {
    /// Encoder-only transfer, decoder warm-up, full warm-up, peak 1e-3.
    pub fn best() -> Self {
        ScheduleSpec {
            transfer: Transfer::EncoderOnly,
            decoder_warmup: true,
            full_warmup: true,
            freeze_encoder: false,
            peak_lr: 1e-3,
            warmup_steps: DEFAULT_WARMUP_STEPS,
        }
    }

    pub fn scratch() -> Self {
        ScheduleSpec {
            transfer: Transfer::None,
            decoder_warmup: false,
            full_warmup: false,
            freeze_encoder: false,
            peak_lr: 1e-2,
            warmup_steps: DEFAULT_WARMUP_STEPS,
        }
    }

    pub fn frozen_encoder() -> Self {
        ScheduleSpec {
            full_warmup: false,
            freeze_encoder: true,
            ..Self::best()
        }
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::best()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    DecoderWarmup,
    FullWarmup,
    Main,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub steps: u64,
    pub trainable: BTreeSet<Component>,
    pub law: LrLaw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSchedule {
    pub transfer: Transfer,
    pub phases: Vec<Phase>,
    pub peak_lr: f64,
    pub total_steps: u64,
}

/// Components a segmentation run can update.
fn seg_components() -> BTreeSet<Component> {
    [Component::Stem, Component::Encoder, Component::Decoder, Component::SegHead].into()
}

pub fn build_schedule(spec: &ScheduleSpec, total_steps: u64) -> Result<FinetuneSchedule> {
    if !(spec.peak_lr > 0.0) {
        return Err(Error::Config(format!("peak_lr must be > 0, got {}", spec.peak_lr)));
    }
    if spec.transfer == Transfer::None && spec.decoder_warmup {
        return Err(Error::Config("decoder warm-up needs a transferred encoder (transfer = none)".into()));
    }
    if spec.transfer == Transfer::None && spec.freeze_encoder {
        return Err(Error::Config("freezing a randomly initialized encoder (transfer = none)".into()));
    }
    let warm = spec.warmup_steps * (spec.decoder_warmup as u64 + spec.full_warmup as u64);
    if (spec.decoder_warmup || spec.full_warmup) && spec.warmup_steps == 0 {
        return Err(Error::Config("warmup_steps must be > 0 when a warm-up is enabled".into()));
    }
    if warm >= total_steps {
        return Err(Error::Config(format!(
            "warm-ups take {warm} of {total_steps} steps, leaving no main phase"
        )));
    }
    let mut main_set = seg_components();
    if spec.freeze_encoder {
        main_set.remove(&Component::Stem);
        main_set.remove(&Component::Encoder);
    }
    let mut phases = Vec::new();
    if spec.decoder_warmup {
        phases.push(Phase {
            kind: PhaseKind::DecoderWarmup,
            steps: spec.warmup_steps,
            trainable: [Component::Decoder, Component::SegHead].into(),
            law: LrLaw::linear_warmup(spec.peak_lr, spec.warmup_steps),
        });
    }
    if spec.full_warmup {
        phases.push(Phase {
            kind: PhaseKind::FullWarmup,
            steps: spec.warmup_steps,
            trainable: main_set.clone(),
            law: LrLaw::linear_warmup(spec.peak_lr, spec.warmup_steps),
        });
    }
    phases.push(Phase {
        kind: PhaseKind::Main,
        steps: total_steps - warm,
        trainable: main_set,
        law: LrLaw::poly(spec.peak_lr, total_steps - warm),
    });
    Ok(FinetuneSchedule {
        transfer: spec.transfer,
        phases,
        peak_lr: spec.peak_lr,
        total_steps,
    })
}

impl FinetuneSchedule {
    /// Phase index and the step within it, for `0 <= step < total_steps`.
    pub fn locate(&self, step: u64) -> Result<(usize, u64)> {
        let mut start = 0;
        for (i, p) in self.phases.iter().enumerate() {
            if step < start + p.steps {
                return Ok((i, step - start));
            }
            start += p.steps;
        }
        Err(Error::StepOutOfRange {
            step,
            total: self.total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let (i, local) = self.locate(step)?;
        self.phases[i].law.lr_at(local)
    }

    pub fn trainable_at(&self, step: u64) -> Result<&BTreeSet<Component>> {
        Ok(&self.phases[self.locate(step)?.0].trainable)
    }

    /// Every component not trainable at `step`.
    pub fn frozen_at(&self, step: u64) -> Result<BTreeSet<Component>> {
        let t = self.trainable_at(step)?;
        Ok(Component::ALL.into_iter().filter(|c| !t.contains(c)).collect())
    }

    /// First step of every phase after the first.
    pub fn boundaries(&self) -> Vec<u64> {
        self.phases
            .iter()
            .scan(0, |acc, p| {
                *acc += p.steps;
                Some(*acc)
            })
            .take(self.phases.len() - 1)
            .collect()
    }

    /// Makes the stem trainable in every phase.
    pub fn train_stem_throughout(&mut self) {
        for p in &mut self.phases {
            p.trainable.insert(Component::Stem);
        }
    }
}

/// Image patches with one class id per voxel (batch, z, y, x order).
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    pub image: Tensor5<f32>,
    pub labels: Vec<u8>,
}

impl SegBatch {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let s = self.image.shape();
        if self.labels.len() != s.batch() * s.spatial_len() {
            return Err(Error::shape("SegBatch labels", s.batch() * s.spatial_len(), self.labels.len()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Invalid(format!("label {l} out of range for {classes} classes")));
        }
        Ok(())
    }
}

fn crop_case(case: &SegCase, patch: [usize; 3], offset: [usize; 3]) -> (Tensor5<f32>, Vec<u8>) {
    let image = patch_at(&case.image, patch, offset);
    let labels = crop_padded(&case.labels, 1, case.image.dims, patch, offset);
    (image, labels)
}

/// Random crops from the cases listed in `pool`, augmented jointly.
pub fn sample_seg_batch<R: Rng + ?Sized>(
    cases: &[SegCase],
    pool: &[usize],
    batch: usize,
    patch: [usize; 3],
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<SegBatch> {
    if pool.is_empty() {
        return Err(Error::Invalid("no training cases".into()));
    }
    let mut images = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch * patch.iter().product::<usize>());
    for _ in 0..batch {
        let case = &cases[pool[rng.random_range(0..pool.len())]];
        let offset = random_offset(case.image.dims, patch, rng);
        let (img, lab) = crop_case(case, patch, offset);
        let params = AugmentParams::sample(augment, rng);
        images.push(augment_patch(&img, &params));
        labels.extend(augment_labels(&lab, patch, &params));
    }
    Ok(SegBatch {
        image: Tensor5::stack_batch(&images)?,
        labels,
    })
}

/// Deterministic subset of `n` of `total` case indices for `seed`, in
/// ascending order; `None` or `n >= total` selects everything.
pub fn subset_indices(total: usize, n: Option<usize>, seed: u64) -> Vec<usize> {
    match n {
        Some(n) if n < total => {
            let mut idx: Vec<usize> = (0..total).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(3);
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    }
}

/// Voxel-wise argmax over channels for batch item `b`.
pub fn argmax_labels<T: Scalar>(logits: &Tensor5<T>, b: usize) -> Vec<u8> {
    let s = logits.shape();
    (0..s.spatial_len())
        .map(|i| {
            let mut best = 0;
            for c in 1..s.channels() {
                if logits.plane(b, c)[i].as_f64() > logits.plane(b, best)[i].as_f64() {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Prediction and reference on the centre patch of `case`.
pub fn segment_case(net: &Network<f32>, case: &SegCase) -> Result<(Vec<u8>, Vec<u8>)> {
    let patch = net.config().patch_size;
    let (img, gt) = crop_case(case, patch, center_offset(case.image.dims, patch));
    let logits = net.forward_dense(&img)?;
    Ok((argmax_labels(&logits, 0), gt))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValRecord {
    pub step: u64,
    /// Mean Dice over validation cases for classes 1..C.
    pub class_dice: Vec<f64>,
    pub mean_dice: f64,
}

impl ValRecord {
    pub fn log_line(&self) -> String {
        let per: Vec<String> = self.class_dice.iter().map(|d| format!("{d:.6}")).collect();
        format!("{}\t{}\t{:.6}", self.step, per.join(","), self.mean_dice)
    }
}

pub fn validate(net: &Network<f32>, val: &[SegCase], step: u64) -> Result<ValRecord> {
    if val.is_empty() {
        return Err(Error::Invalid("validation split is empty".into()));
    }
    let classes = net.config().out_channels;
    let mut sums = vec![0.0; classes - 1];
    for case in val {
        let (pred, gt) = segment_case(net, case)?;
        for (c, s) in sums.iter_mut().enumerate() {
            let class = (c + 1) as u8;
            let p: Vec<bool> = pred.iter().map(|&l| l == class).collect();
            let g: Vec<bool> = gt.iter().map(|&l| l == class).collect();
            *s += dice_masks(&p, &g);
        }
    }
    let class_dice: Vec<f64> = sums.iter().map(|s| s / val.len() as f64).collect();
    let mean_dice = class_dice.iter().sum::<f64>() / class_dice.len() as f64;
    Ok(ValRecord {
        step,
        class_dice,
        mean_dice,
    })
}

fn default_val_every() -> u64 {
    2500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_val_every")]
    pub val_every: u64,
    /// Low-data runs: train on this many cases only.
    #[serde(default)]
    pub train_cases: Option<usize>,
    #[serde(default = "default_stem_policy")]
    pub stem_policy: StemPolicy,
    /// Keep a transferred or adapted stem frozen during the decoder warm-up.
    #[serde(default = "default_true")]
    pub freeze_stem_in_warmup: bool,
    #[serde(default)]
    pub target_spacing: Option<[f64; 3]>,
}

fn default_true() -> bool {
    true
}

fn default_stem_policy() -> StemPolicy {
    StemPolicy::ReplicateScaled
}

impl FinetuneConfig {
    pub fn paper(classes: usize) -> Self {
        let mut network = NetworkConfig::paper_scale();
        network.out_channels = classes;
        FinetuneConfig {
            network,
            schedule: ScheduleSpec::best(),
            steps: 250_000,
            batch_size: 2,
            sgd: SgdConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            val_every: default_val_every(),
            train_cases: None,
            stem_policy: StemPolicy::ReplicateScaled,
            freeze_stem_in_warmup: true,
            target_spacing: Some([1.0; 3]),
        }
    }

    pub fn toy(classes: usize) -> Self {
        let mut network = NetworkConfig::toy();
        network.out_channels = classes;
        FinetuneConfig {
            network,
            // Toy scale: shorter warm-ups and the from-scratch peak LR.
            schedule: ScheduleSpec {
                warmup_steps: 20,
                peak_lr: 1e-2,
                ..ScheduleSpec::best()
            },
            steps: 400,
            val_every: 200,
            target_spacing: None,
            ..Self::paper(classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.network.out_channels < 2 {
            return Err(Error::Config("network.out_channels must be >= 2 for segmentation".into()));
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config("batch_size and val_every must be > 0".into()));
        }
        if self.train_cases == Some(0) {
            return Err(Error::Config("train_cases must be > 0 (omit it to use all cases)".into()));
        }
        build_schedule(&self.schedule, self.steps).map(|_| ())
    }
}

pub struct FinetuneOutcome {
    pub net: Network<f32>,
    pub checkpoint: Checkpoint,
    pub val_log: Vec<ValRecord>,
    /// Learning rate used at every step.
    pub lr_trace: Vec<f64>,
    pub losses: Vec<f64>,
    /// Names of the training cases actually used.
    pub subset: Vec<String>,
    pub transfer: Option<TransferReport>,
}

/// Per-step observer, called after the update of each step (0-based).
pub trait StepHook {
    fn after_step(&mut self, step: u64, net: &Network<f32>);
}

impl StepHook for () {
    fn after_step(&mut self, _: u64, _: &Network<f32>) {}
}

impl<F: FnMut(u64, &Network<f32>)> StepHook for F {
    fn after_step(&mut self, step: u64, net: &Network<f32>) {
        self(step, net)
    }
}

/// The schedule a run follows, with the stem freeze rule applied. An
/// untransferred stem trains in every phase.
pub fn run_schedule(config: &FinetuneConfig, transferred: bool) -> Result<FinetuneSchedule> {
    let mut schedule = build_schedule(&config.schedule, config.steps)?;
    if !transferred || !config.freeze_stem_in_warmup {
        schedule.train_stem_throughout();
    }
    Ok(schedule)
}

/// Builds the fine-tuning network: fresh weights, then the transferred
/// components of `ckpt` (with the stem adapted to the input channel count).
pub fn init_network<R: Rng + ?Sized>(
    config: &FinetuneConfig,
    ckpt: Option<&Checkpoint>,
    rng: &mut R,
) -> Result<(Network<f32>, Option<TransferReport>)> {
    let mut net_cfg = config.network.clone();
    net_cfg.seed = config.seed;
    let mut net = build_network::<f32>(&net_cfg)?;
    let report = match (config.schedule.transfer.policy(), ckpt) {
        (None, None) => None,
        (None, Some(_)) => {
            return Err(Error::Config("a checkpoint was given but schedule.transfer is none".into()));
        }
        (Some(_), None) => {
            return Err(Error::Config(format!(
                "schedule.transfer = {:?} needs a pretrained checkpoint",
                config.schedule.transfer
            )));
        }
        (Some(policy), Some(ck)) => {
            let k = net_cfg.in_channels;
            let mut ck = ck.clone();
            if k != 1 || config.stem_policy == StemPolicy::Random {
                for (name, value) in adapt_stem(&ck, k, config.stem_policy, rng)? {
                    ck.replace_tensor(&name, value)?;
                }
            }
            Some(transfer_weights(&ck, &mut net, policy)?)
        }
    };
    Ok((net, report))
}

/// Runs every phase of the schedule on preprocessed `train` cases and
/// validates on `val` every `val_every` steps and after the last step.
pub fn run_finetune(
    config: &FinetuneConfig,
    ckpt: Option<&Checkpoint>,
    train: &[SegCase],
    val: &[SegCase],
    hook: &mut impl StepHook,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!(
            "empty split: {} training and {} validation cases",
            train.len(),
            val.len()
        )));
    }
    let classes = config.network.out_channels;
    let k = config.network.in_channels;
    for c in train.iter().chain(val) {
        c.validate()?;
        if c.image.channels != k {
            return Err(Error::Invalid(format!(
                "case {} has {} channels, network expects {k}",
                c.image.source, c.image.channels
            )));
        }
        if let Some(l) = c.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Invalid(format!("case {}: label {l} >= {classes} classes", c.image.source)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let (mut net, transfer) = init_network(config, ckpt, &mut rng)?;
    let schedule = run_schedule(config, transfer.is_some())?;
    let pool = subset_indices(train.len(), config.train_cases, config.seed);
    let subset = pool.iter().map(|&i| train[i].image.source.clone()).collect();
    let mut opt = OptimizerState::new(config.sgd, net.params());
    let mut lr_trace = Vec::with_capacity(config.steps as usize);
    let mut losses = Vec::with_capacity(config.steps as usize);
    let mut val_log = Vec::new();
    for step in 0..config.steps {
        let lr = schedule.lr_at(step)?;
        let frozen = schedule.frozen_at(step)?;
        net.set_frozen(frozen.clone());
        let batch = sample_seg_batch(train, &pool, config.batch_size, config.network.patch_size, &config.augment, &mut rng)?;
        let tape = net.forward_dense_tape(&batch.image)?;
        let (loss, grad) = dice_ce_loss(tape.output(), &batch.labels).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged {
                step: step + 1,
                detail: format!("{what} at lr {lr}"),
            },
            other => other,
        })?;
        net.params_mut().zero_grads();
        net.backward(&tape, &grad)?;
        sgd_step(net.params_mut(), &mut opt, lr, &frozen)?;
        lr_trace.push(lr);
        losses.push(loss);
        hook.after_step(step, &net);
        let done = step + 1;
        if done % config.val_every == 0 || done == config.steps {
            val_log.push(validate(&net, val, done)?);
        }
    }
    net.set_frozen(BTreeSet::new());
    let meta = TrainingMeta {
        steps: config.steps,
        seed: config.seed,
        rng: None,
        run_config: Some(serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?),
    };
    let checkpoint = Checkpoint::from_network(&net, meta, Some(&opt))?;
    Ok(FinetuneOutcome {
        net,
        checkpoint,
        val_log,
        lr_trace,
        losses,
        subset,
        transfer,
    })
}
