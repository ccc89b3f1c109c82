//! Residual-encoder U-Net with a dense segmentation path and a sparse
//! masked-reconstruction path.

mod checkpoint;
mod forward;
mod transfer;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{ConvSpec, DEFAULT_SLOPE};
use crate::params::{Component, ParamStore};
use crate::sparse::densification_spec;
use crate::tensor::{Scalar, Shape5, Tensor5};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, TensorRecord, TrainingMeta};
pub use forward::Tape;
pub use transfer::{adapt_stem, transfer_weights, StemPolicy, TransferPolicy, TransferReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Encoder adaptations for masked inputs. All off is the plain baseline
/// (dense ops on zeroed input).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sparsification {
    /// Re-mask after every encoder conv and exclude masked voxels from norm statistics.
    pub sparse_conv_norm: bool,
    /// Fill masked skip/bottleneck voxels with a learned per-stage token.
    pub mask_token: bool,
    /// 3x3x3 conv after filling, at every resolution except the highest.
    pub dens_conv: bool,
}

impl Sparsification {
    pub const BASE: Self = Sparsification {
        sparse_conv_norm: false,
        mask_token: false,
        dens_conv: false,
    };
    pub const FULL: Self = Sparsification {
        sparse_conv_norm: true,
        mask_token: true,
        dens_conv: true,
    };
}

impl Default for Sparsification {
    fn default() -> Self {
        Self::FULL
    }
}

fn default_eps() -> f64 {
    1e-5
}
fn default_slope() -> f64 {
    DEFAULT_SLOPE
}
fn default_decoder_convs() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub patch_size: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_decoder_convs")]
    pub decoder_convs: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default)]
    pub sparsification: Sparsification,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    fn from_lists(patch: usize, widths: &[usize], blocks: &[usize], strides: &[usize]) -> Self {
        NetworkConfig {
            patch_size: [patch; 3],
            in_channels: 1,
            out_channels: 2,
            stages: widths
                .iter()
                .zip(blocks)
                .zip(strides)
                .map(|((&width, &blocks), &stride)| StageConfig { width, blocks, stride })
                .collect(),
            decoder_convs: default_decoder_convs(),
            norm_eps: default_eps(),
            slope: default_slope(),
            sparsification: Sparsification::FULL,
            seed: 0,
        }
    }

    /// 160^3 patches, six stages, 5^3 bottleneck.
    pub fn paper_scale() -> Self {
        Self::from_lists(160, &[32, 64, 128, 256, 320, 320], &[1, 3, 4, 6, 6, 6], &[1, 2, 2, 2, 2, 2])
    }

    /// 32^3 patches, four narrow stages, 4^3 bottleneck.
    pub fn toy() -> Self {
        Self::from_lists(32, &[8, 8, 16, 32], &[1, 1, 1, 1], &[1, 2, 2, 2])
    }

    /// Spatial size of every stage output, highest resolution first.
    pub fn stage_dims(&self) -> Result<Vec<[usize; 3]>> {
        let mut dims = self.patch_size;
        let mut out = Vec::with_capacity(self.stages.len());
        for (s, st) in self.stages.iter().enumerate() {
            for (a, d) in dims.iter_mut().enumerate() {
                if st.stride == 0 || *d % st.stride != 0 {
                    return Err(Error::Config(format!(
                        "patch size {:?} not divisible by the strides (stage {s}, axis {a})",
                        self.patch_size
                    )));
                }
                *d /= st.stride;
            }
            out.push(dims);
        }
        Ok(out)
    }

    pub fn bottleneck(&self) -> Result<[usize; 3]> {
        Ok(*self.stage_dims()?.last().ok_or_else(|| Error::Config("no stages".into()))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(Error::Config(format!("need at least 2 stages, got {}", self.stages.len())));
        }
        if let Some(s) = self.stages.iter().position(|s| s.width == 0 || s.blocks == 0) {
            return Err(Error::Config(format!("stage {s} needs width > 0 and at least one block")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("in/out channels must be > 0".into()));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Config("patch size must be > 0".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config(format!("norm eps must be > 0, got {}", self.norm_eps)));
        }
        if self.decoder_convs == 0 {
            return Err(Error::Config("decoder_convs must be >= 1".into()));
        }
        let dims = self.stage_dims()?;
        if dims.last().is_some_and(|d| d.contains(&0)) {
            return Err(Error::Config("bottleneck collapsed to zero".into()));
        }
        Ok(())
    }

    /// Validation plus the requirement that the bottleneck equals a mask grid.
    pub fn validate_with_grid(&self, grid: [usize; 3]) -> Result<()> {
        self.validate()?;
        let b = self.bottleneck()?;
        if b != grid {
            return Err(Error::Config(format!("bottleneck {b:?} does not match mask grid {grid:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    pub weight: usize,
    pub bias: Option<usize>,
    pub spec: ConvSpec,
    pub transpose: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct NormLayer {
    pub gain: usize,
    pub shift: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvNorm {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    pub first: ConvNorm,
    pub second: ConvNorm,
    pub projection: Option<ConvNorm>,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderStage {
    pub up: ConvLayer,
    pub convs: Vec<ConvNorm>,
}

#[derive(Clone, Debug)]
pub(crate) struct Topology {
    pub stem: ConvNorm,
    pub stages: Vec<Vec<ResBlock>>,
    /// `decoder[s]` produces resolution `s` from resolution `s + 1`.
    pub decoder: Vec<DecoderStage>,
    pub seg_head: ConvLayer,
    pub recon_head: ConvLayer,
    pub tokens: Vec<usize>,
    /// Densification conv per stage; `None` at the highest resolution.
    pub dens: Vec<Option<ConvLayer>>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    params: ParamStore<T>,
    pub(crate) topo: Topology,
    frozen: BTreeSet<Component>,
}

struct Builder<'a, T: Scalar> {
    params: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn vector(&mut self, name: String, c: usize, value: f64, component: Component) -> usize {
        self.params
            .add(name, Tensor5::full(Shape5::new(1, c, 1, 1, 1), T::from_f64(value)), component, false)
    }

    /// He-normal init with the leaky-relu gain; biases start at zero.
    fn conv(&mut self, name: &str, spec: ConvSpec, transpose: bool, slope: f64, component: Component) -> ConvLayer {
        let shape = if transpose {
            spec.transpose_weight_shape()
        } else {
            spec.weight_shape()
        };
        let fan_in = if transpose {
            // Each output voxel sees in_channels * (taps per stride cell).
            let per_cell: usize = (0..3).map(|a| spec.kernel[a].div_ceil(spec.stride[a])).product();
            spec.in_channels * per_cell
        } else {
            spec.in_channels * spec.kernel_volume()
        };
        let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        let w = Tensor5::randn(shape, std, self.rng);
        let weight = self.params.add(format!("{name}.weight"), w, component, true);
        let bias = spec.has_bias.then(|| {
            self.params.add(
                format!("{name}.bias"),
                Tensor5::zeros(Shape5::new(1, spec.out_channels, 1, 1, 1)),
                component,
                false,
            )
        });
        ConvLayer {
            weight,
            bias,
            spec,
            transpose,
        }
    }

    fn norm(&mut self, name: &str, c: usize, component: Component) -> NormLayer {
        NormLayer {
            gain: self.vector(format!("{name}.gain"), c, 1.0, component),
            shift: self.vector(format!("{name}.shift"), c, 0.0, component),
        }
    }

    fn conv_norm(&mut self, name: &str, spec: ConvSpec, slope: f64, component: Component) -> ConvNorm {
        let out = spec.out_channels;
        ConvNorm {
            conv: self.conv(&format!("{name}.conv"), spec, false, slope, component),
            norm: self.norm(&format!("{name}.norm"), out, component),
        }
    }
}

/// Builds a network with parameters drawn deterministically from `config.seed`.
pub fn build_network<T: Scalar>(config: &NetworkConfig) -> Result<Network<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    build_network_with_rng(config, &mut rng)
}

pub fn build_network_with_rng<T: Scalar>(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Network<T>> {
    config.validate()?;
    let slope = config.slope;
    let mut b = Builder {
        params: ParamStore::new(),
        rng,
    };
    let w0 = config.stages[0].width;
    let stem = b.conv_norm("stem", ConvSpec::same(config.in_channels, w0, 3, 1), slope, Component::Stem);

    let mut stages = Vec::with_capacity(config.stages.len());
    let mut cin = w0;
    for (s, st) in config.stages.iter().enumerate() {
        let mut blocks = Vec::with_capacity(st.blocks);
        for i in 0..st.blocks {
            let stride = if i == 0 { st.stride } else { 1 };
            let name = format!("encoder.s{s}.b{i}");
            let first = b.conv_norm(
                &format!("{name}.c1"),
                ConvSpec::same(cin, st.width, 3, stride),
                slope,
                Component::Encoder,
            );
            let second = b.conv_norm(
                &format!("{name}.c2"),
                ConvSpec::same(st.width, st.width, 3, 1),
                slope,
                Component::Encoder,
            );
            let projection = (stride != 1 || cin != st.width).then(|| {
                b.conv_norm(
                    &format!("{name}.proj"),
                    ConvSpec::same(cin, st.width, 1, stride),
                    slope,
                    Component::Encoder,
                )
            });
            blocks.push(ResBlock {
                first,
                second,
                projection,
            });
            cin = st.width;
        }
        stages.push(blocks);
    }

    let n = config.stages.len();
    let mut decoder: Vec<Option<DecoderStage>> = vec![None; n - 1];
    for s in (0..n - 1).rev() {
        let (below, here) = (config.stages[s + 1].width, config.stages[s].width);
        let k = config.stages[s + 1].stride;
        let spec = ConvSpec {
            in_channels: below,
            out_channels: here,
            kernel: [k; 3],
            stride: [k; 3],
            padding: [0; 3],
            has_bias: true,
        };
        let up = b.conv(&format!("decoder.s{s}.up"), spec, true, slope, Component::Decoder);
        let convs = (0..config.decoder_convs)
            .map(|j| {
                let cin = if j == 0 { 2 * here } else { here };
                b.conv_norm(
                    &format!("decoder.s{s}.c{j}"),
                    ConvSpec::same(cin, here, 3, 1),
                    slope,
                    Component::Decoder,
                )
            })
            .collect();
        decoder[s] = Some(DecoderStage { up, convs });
    }
    let decoder = decoder.into_iter().map(|d| d.expect("filled")).collect();

    let seg_head = b.conv(
        "seg_head",
        ConvSpec::same(w0, config.out_channels, 1, 1).with_bias(true),
        false,
        1.0,
        Component::SegHead,
    );
    let recon_head = b.conv(
        "recon_head",
        ConvSpec::same(w0, config.in_channels, 1, 1).with_bias(true),
        false,
        1.0,
        Component::ReconHead,
    );
    let tokens = config
        .stages
        .iter()
        .enumerate()
        .map(|(s, st)| {
            let t = Tensor5::randn(Shape5::new(1, st.width, 1, 1, 1), 0.02, b.rng);
            b.params.add(format!("mask_token.s{s}"), t, Component::MaskToken, false)
        })
        .collect();
    let dens = config
        .stages
        .iter()
        .enumerate()
        .map(|(s, st)| {
            (s > 0).then(|| {
                b.conv(
                    &format!("densify.s{s}"),
                    densification_spec(st.width),
                    false,
                    slope,
                    Component::Densify,
                )
            })
        })
        .collect();

    Ok(Network {
        config: config.clone(),
        params: b.params,
        topo: Topology {
            stem,
            stages,
            decoder,
            seg_head,
            recon_head,
            tokens,
            dens,
        },
        frozen: BTreeSet::new(),
    })
}

impl<T: Scalar> Network<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }
    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
    pub fn frozen(&self) -> &BTreeSet<Component> {
        &self.frozen
    }

    /// Frozen components get no gradient, no update and no momentum.
    pub fn set_frozen(&mut self, components: BTreeSet<Component>) {
        self.frozen = components;
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        !self.frozen.contains(&self.params.get(id).component)
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            topo: self.topo.clone(),
            frozen: self.frozen.clone(),
        }
    }

    /// Parameter names for a component, in store order.
    pub fn names_of(&self, component: Component) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.component == component)
            .map(|p| p.name.as_str())
            .collect()
    }
}

/// Freezes `components` on `net`; `list` is a comma-separated set of names.
pub fn set_frozen<T: Scalar>(net: &mut Network<T>, list: &str) -> Result<()> {
    net.set_frozen(crate::params::parse_components(list)?);
    Ok(())
}
