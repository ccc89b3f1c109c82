//! Moving pretrained weights into a fine-tuning network.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Component;
use crate::tensor::{Scalar, Shape5, Tensor5};

use super::{Checkpoint, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPolicy {
    EncoderOnly,
    EncoderAndDecoder,
}

impl TransferPolicy {
    pub fn components(&self) -> BTreeSet<Component> {
        match self {
            TransferPolicy::EncoderOnly => [Component::Stem, Component::Encoder].into(),
            TransferPolicy::EncoderAndDecoder => [Component::Stem, Component::Encoder, Component::Decoder].into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemPolicy {
    /// Tile the single-channel kernel K times and scale by 1/K.
    ReplicateScaled,
    Random,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Target tensors left at their fresh initialization.
    pub initialized: Vec<String>,
    /// Checkpoint tensors that were not used.
    pub skipped: Vec<String>,
}

/// Copies the policy's components from `ckpt` into `target`. Nothing is
/// written unless every transferred tensor exists with a matching shape.
pub fn transfer_weights<T: Scalar>(
    ckpt: &Checkpoint,
    target: &mut Network<T>,
    policy: TransferPolicy,
) -> Result<TransferReport> {
    let wanted = policy.components();
    let mut plan = Vec::new();
    let mut report = TransferReport::default();
    for (id, p) in target.params().iter().enumerate() {
        if !wanted.contains(&p.component) {
            report.initialized.push(p.name.clone());
            continue;
        }
        let (rec, value) = ckpt
            .tensor(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor {}", p.name)))?;
        if rec.shape != p.value.shape().0 {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: checkpoint {}, target {}",
                p.name,
                Shape5(rec.shape),
                p.value.shape()
            )));
        }
        plan.push((id, value));
        report.copied.push(p.name.clone());
    }
    for (id, value) in plan {
        target.params_mut().get_mut(id).value = value.cast();
    }
    report.skipped = ckpt
        .records()
        .iter()
        .filter(|r| !report.copied.contains(&r.name))
        .map(|r| r.name.clone())
        .collect();
    Ok(report)
}

/// Stem tensors for a `k`-channel input, as `(name, value)` pairs ready for
/// [`Checkpoint::replace_tensor`].
pub fn adapt_stem<R: Rng + ?Sized>(
    ckpt: &Checkpoint,
    k: usize,
    policy: StemPolicy,
    rng: &mut R,
) -> Result<Vec<(String, Tensor5<f32>)>> {
    if k < 1 {
        return Err(Error::Invalid(format!("stem input channels must be >= 1, got {k}")));
    }
    let name = "stem.conv.weight";
    let (_, w) = ckpt
        .tensor(name)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor {name}")))?;
    let [out, cin, kd, kh, kw] = w.shape().0;
    if cin != 1 {
        return Err(Error::Checkpoint(format!("{name} has {cin} input channels, expected 1")));
    }
    let shape = Shape5::new(out, k, kd, kh, kw);
    let taps = kd * kh * kw;
    let mut out_tensors = Vec::new();
    match policy {
        StemPolicy::ReplicateScaled => {
            let scale = 1.0 / k as f32;
            let mut data = Vec::with_capacity(shape.len());
            for o in 0..out {
                let src = &w.data()[o * taps..(o + 1) * taps];
                for _ in 0..k {
                    data.extend(src.iter().map(|&v| v * scale));
                }
            }
            out_tensors.push((name.to_string(), Tensor5::from_vec(shape, data)?));
        }
        StemPolicy::Random => {
            let slope = ckpt.config().slope;
            let std = (2.0 / ((1.0 + slope * slope) * (k * taps) as f64)).sqrt();
            out_tensors.push((name.to_string(), Tensor5::randn(shape, std, rng)));
            for (suffix, v) in [("gain", 1.0), ("shift", 0.0)] {
                let n = format!("stem.norm.{suffix}");
                let (rec, _) = ckpt
                    .tensor(&n)
                    .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor {n}")))?;
                out_tensors.push((n, Tensor5::full(Shape5(rec.shape), v)));
            }
        }
    }
    Ok(out_tensors)
}
