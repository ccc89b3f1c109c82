//! Forward passes recorded on a linear tape, and the reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::conv::{conv3d_grads, conv3d_transpose_grads};
use crate::kernels::{
    conv3d, conv3d_transpose, leaky_relu, leaky_relu_backward, masked_instance_norm, masked_instance_norm_backward,
    NormCache,
};
use crate::masking::{MaskGrid, VoxelMask};
use crate::sparse::{apply_mask, densify, densify_backward};
use crate::tensor::{Scalar, Shape5, Tensor5};

use super::{ConvLayer, ConvNorm, Network, NormLayer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Seg,
    Recon,
}

#[derive(Debug)]
enum Op<T> {
    Conv {
        x: usize,
        y: usize,
        layer: ConvLayer,
        mask: Option<usize>,
    },
    Norm {
        x: usize,
        y: usize,
        layer: NormLayer,
        mask: Option<usize>,
        cache: NormCache<T>,
    },
    Act {
        x: usize,
        y: usize,
    },
    Add {
        a: usize,
        b: usize,
        y: usize,
    },
    Concat {
        a: usize,
        b: usize,
        y: usize,
    },
    Densify {
        x: usize,
        y: usize,
        token: usize,
        mask: usize,
    },
}

/// Recorded activations of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    values: Vec<Tensor5<T>>,
    needs_grad: Vec<bool>,
    ops: Vec<Op<T>>,
    /// Index 0 is the input resolution, `s + 1` is stage `s`.
    masks: Vec<VoxelMask>,
    stage_outputs: Vec<usize>,
    stem_conv: usize,
    output: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn output(&self) -> &Tensor5<T> {
        &self.values[self.output]
    }

    pub fn into_output(mut self) -> Tensor5<T> {
        self.values.swap_remove(self.output)
    }

    /// Encoder output of every stage, before any token filling.
    pub fn stage_features(&self) -> Vec<&Tensor5<T>> {
        self.stage_outputs.iter().map(|&i| &self.values[i]).collect()
    }

    /// Raw output of the stem convolution (before its norm).
    pub fn stem_conv_output(&self) -> &Tensor5<T> {
        &self.values[self.stem_conv]
    }

    /// Mask at the input resolution, if the pass was masked.
    pub fn input_mask(&self) -> Option<&VoxelMask> {
        self.masks.first()
    }
}

fn concat_channels<T: Scalar>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch() != sb.batch() || sa.spatial() != sb.spatial() {
        return Err(Error::shape("concat", sa, sb));
    }
    let n = sa.spatial_len();
    let (ca, cb) = (sa.channels() * n, sb.channels() * n);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..sa.batch() {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    let [d, h, w] = sa.spatial();
    Tensor5::from_vec(Shape5::new(sa.batch(), sa.channels() + sb.channels(), d, h, w), data)
}

fn split_channels<T: Scalar>(g: &Tensor5<T>, first: usize) -> (Tensor5<T>, Tensor5<T>) {
    let s = g.shape();
    let n = s.spatial_len();
    let second = s.channels() - first;
    let (mut a, mut b) = (Vec::with_capacity(s.batch() * first * n), Vec::with_capacity(s.batch() * second * n));
    for chunk in g.data().chunks(s.channels() * n) {
        a.extend_from_slice(&chunk[..first * n]);
        b.extend_from_slice(&chunk[first * n..]);
    }
    let [d, h, w] = s.spatial();
    (
        Tensor5::from_vec(Shape5::new(s.batch(), first, d, h, w), a).expect("sizes"),
        Tensor5::from_vec(Shape5::new(s.batch(), second, d, h, w), b).expect("sizes"),
    )
}

struct Recorder<'a, T: Scalar> {
    net: &'a Network<T>,
    tape: Tape<T>,
}

impl<T: Scalar> Recorder<'_, T> {
    fn push(&mut self, value: Tensor5<T>, needs: bool) -> usize {
        self.tape.values.push(value);
        self.tape.needs_grad.push(needs);
        self.tape.values.len() - 1
    }

    fn param(&self, id: usize) -> &Tensor5<T> {
        self.net.params.value(id)
    }

    fn conv(&mut self, x: usize, layer: &ConvLayer, mask: Option<usize>) -> Result<usize> {
        let w = self.param(layer.weight);
        let bias = layer.bias.map(|b| self.param(b).data());
        let xv = &self.tape.values[x];
        let mut y = if layer.transpose {
            conv3d_transpose(xv, w, bias, &layer.spec)?
        } else {
            conv3d(xv, w, bias, &layer.spec)?
        };
        if let Some(m) = mask {
            apply_mask(&mut y, &self.tape.masks[m])?;
        }
        let needs = self.tape.needs_grad[x] || self.net.is_trainable(layer.weight);
        let y = self.push(y, needs);
        self.tape.ops.push(Op::Conv {
            x,
            y,
            layer: layer.clone(),
            mask,
        });
        Ok(y)
    }

    fn norm(&mut self, x: usize, layer: &NormLayer, mask: Option<usize>) -> Result<usize> {
        let (y, cache) = masked_instance_norm(
            &self.tape.values[x],
            self.param(layer.gain).data(),
            self.param(layer.shift).data(),
            self.net.config.norm_eps,
            mask.map(|m| &self.tape.masks[m]),
        )?;
        let needs = self.tape.needs_grad[x] || self.net.is_trainable(layer.gain);
        let y = self.push(y, needs);
        self.tape.ops.push(Op::Norm {
            x,
            y,
            layer: layer.clone(),
            mask,
            cache,
        });
        Ok(y)
    }

    fn act(&mut self, x: usize) -> usize {
        let y = leaky_relu(&self.tape.values[x], self.net.config.slope);
        let y = self.push(y, self.tape.needs_grad[x]);
        self.tape.ops.push(Op::Act { x, y });
        y
    }

    fn conv_norm_act(&mut self, x: usize, layer: &ConvNorm, mask: Option<usize>, act: bool) -> Result<usize> {
        let c = self.conv(x, &layer.conv, mask)?;
        let n = self.norm(c, &layer.norm, mask)?;
        Ok(if act { self.act(n) } else { n })
    }

    fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        let mut y = self.tape.values[a].clone();
        y.add_assign(&self.tape.values[b])?;
        let needs = self.tape.needs_grad[a] || self.tape.needs_grad[b];
        let y = self.push(y, needs);
        self.tape.ops.push(Op::Add { a, b, y });
        Ok(y)
    }

    fn concat(&mut self, a: usize, b: usize) -> Result<usize> {
        let y = concat_channels(&self.tape.values[a], &self.tape.values[b])?;
        let needs = self.tape.needs_grad[a] || self.tape.needs_grad[b];
        let y = self.push(y, needs);
        self.tape.ops.push(Op::Concat { a, b, y });
        Ok(y)
    }

    fn densify(&mut self, x: usize, token: usize, mask: usize) -> Result<usize> {
        let y = densify(&self.tape.values[x], &self.tape.masks[mask], self.param(token).data())?;
        let needs = self.tape.needs_grad[x] || self.net.is_trainable(token);
        let y = self.push(y, needs);
        self.tape.ops.push(Op::Densify { x, y, token, mask });
        Ok(y)
    }
}

impl<T: Scalar> Network<T> {
    fn check_input(&self, input: &Tensor5<T>) -> Result<()> {
        let s = input.shape();
        let c = &self.config;
        if s.batch() == 0 || s.channels() != c.in_channels || s.spatial() != c.patch_size {
            let [d, h, w] = c.patch_size;
            return Err(Error::shape(
                "network input",
                format!("Bx{}x{d}x{h}x{w}", c.in_channels),
                s,
            ));
        }
        Ok(())
    }

    fn build_masks(&self, batch: usize, grids: &[MaskGrid]) -> Result<Vec<VoxelMask>> {
        if grids.len() != batch {
            return Err(Error::shape("mask batch", batch, grids.len()));
        }
        let bottleneck = self.config.bottleneck()?;
        if let Some(g) = grids.iter().find(|g| g.grid_shape() != bottleneck) {
            return Err(Error::shape(
                "mask grid vs bottleneck",
                format!("{bottleneck:?}"),
                format!("{:?}", g.grid_shape()),
            ));
        }
        std::iter::once(Ok(self.config.patch_size))
            .chain(self.config.stage_dims()?.into_iter().map(Ok))
            .map(|dims: Result<[usize; 3]>| VoxelMask::from_grids(grids, dims?))
            .collect()
    }

    fn run(&self, input: &Tensor5<T>, head: Head, grids: Option<&[MaskGrid]>) -> Result<Tape<T>> {
        self.check_input(input)?;
        input.check_finite("network input")?;
        let masks = match grids {
            Some(g) => self.build_masks(input.shape().batch(), g)?,
            None => Vec::new(),
        };
        let masked = !masks.is_empty();
        let mut x0 = input.clone();
        if masked {
            apply_mask(&mut x0, &masks[0])?;
        }
        let mut r = Recorder {
            net: self,
            tape: Tape {
                values: Vec::new(),
                needs_grad: Vec::new(),
                ops: Vec::new(),
                masks,
                stage_outputs: Vec::new(),
                stem_conv: 0,
                output: 0,
            },
        };
        let flags = self.config.sparsification;
        let enc_mask = |res: usize| (masked && flags.sparse_conv_norm).then_some(res);
        let topo = &self.topo;

        let x = r.push(x0, false);
        let stem = r.conv(x, &topo.stem.conv, enc_mask(0))?;
        r.tape.stem_conv = stem;
        let n = r.norm(stem, &topo.stem.norm, enc_mask(0))?;
        let mut x = r.act(n);
        for (s, blocks) in topo.stages.iter().enumerate() {
            let m = enc_mask(s + 1);
            for block in blocks {
                let h = r.conv_norm_act(x, &block.first, m, true)?;
                let h = r.conv_norm_act(h, &block.second, m, false)?;
                let shortcut = match &block.projection {
                    Some(p) => r.conv_norm_act(x, p, m, false)?,
                    None => x,
                };
                let sum = r.add(h, shortcut)?;
                x = r.act(sum);
            }
            r.tape.stage_outputs.push(x);
        }

        let mut skips = r.tape.stage_outputs.clone();
        if head == Head::Recon {
            for (s, skip) in skips.iter_mut().enumerate() {
                if masked && flags.mask_token {
                    *skip = r.densify(*skip, topo.tokens[s], s + 1)?;
                }
                if flags.dens_conv {
                    if let Some(layer) = &topo.dens[s] {
                        *skip = r.conv(*skip, layer, None)?;
                    }
                }
            }
        }

        let mut x = *skips.last().expect("at least two stages");
        for s in (0..topo.decoder.len()).rev() {
            let stage = &topo.decoder[s];
            let up = r.conv(x, &stage.up, None)?;
            x = r.concat(up, skips[s])?;
            for layer in &stage.convs {
                x = r.conv_norm_act(x, layer, None, true)?;
            }
        }
        let head_layer = match head {
            Head::Seg => &topo.seg_head,
            Head::Recon => &topo.recon_head,
        };
        r.tape.output = r.conv(x, head_layer, None)?;
        r.tape.output().check_finite("network forward")?;
        Ok(r.tape)
    }

    /// Segmentation logits `B x out_channels x patch`.
    pub fn forward_dense(&self, input: &Tensor5<T>) -> Result<Tensor5<T>> {
        Ok(self.run(input, Head::Seg, None)?.into_output())
    }

    pub fn forward_dense_tape(&self, input: &Tensor5<T>) -> Result<Tape<T>> {
        self.run(input, Head::Seg, None)
    }

    /// Masked reconstruction with one bottleneck-shaped grid per batch item.
    pub fn forward_sparse(&self, input: &Tensor5<T>, masks: &[MaskGrid]) -> Result<Tensor5<T>> {
        Ok(self.run(input, Head::Recon, Some(masks))?.into_output())
    }

    pub fn forward_sparse_tape(&self, input: &Tensor5<T>, masks: &[MaskGrid]) -> Result<Tape<T>> {
        self.run(input, Head::Recon, Some(masks))
    }

    /// Reconstruction path with a plain dense encoder (no masks anywhere).
    pub fn forward_recon_dense(&self, input: &Tensor5<T>) -> Result<Tensor5<T>> {
        Ok(self.run(input, Head::Recon, None)?.into_output())
    }

    /// Per-stage encoder outputs, optionally under masks.
    pub fn encoder_features(&self, input: &Tensor5<T>, masks: Option<&[MaskGrid]>) -> Result<Vec<Tensor5<T>>> {
        let tape = self.run(input, Head::Recon, masks)?;
        Ok(tape.stage_features().into_iter().cloned().collect())
    }

    /// Accumulates parameter gradients of `<out_grad, output>` into the store.
    /// Frozen parameters are left untouched.
    pub fn backward(&mut self, tape: &Tape<T>, out_grad: &Tensor5<T>) -> Result<()> {
        let out_shape = tape.output().shape();
        if out_grad.shape() != out_shape {
            return Err(Error::shape("backward out_grad", out_shape, out_grad.shape()));
        }
        let slope = self.config.slope;
        let mut grads: Vec<Option<Tensor5<T>>> = vec![None; tape.values.len()];
        grads[tape.output] = Some(out_grad.clone());

        fn give<T: Scalar>(grads: &mut [Option<Tensor5<T>>], needs: &[bool], id: usize, g: Tensor5<T>) -> Result<()> {
            if !needs[id] {
                return Ok(());
            }
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for op in tape.ops.iter().rev() {
            let y = match op {
                Op::Conv { y, .. }
                | Op::Norm { y, .. }
                | Op::Act { y, .. }
                | Op::Add { y, .. }
                | Op::Concat { y, .. }
                | Op::Densify { y, .. } => *y,
            };
            let Some(mut g) = grads[y].take() else {
                continue;
            };
            let needs = &tape.needs_grad;
            match op {
                Op::Conv { x, layer, mask, .. } => {
                    if let Some(m) = mask {
                        apply_mask(&mut g, &tape.masks[*m])?;
                    }
                    let need_params = self.is_trainable(layer.weight);
                    let w = self.params.value(layer.weight);
                    let (gi, gw, gb) = if layer.transpose {
                        conv3d_transpose_grads(&tape.values[*x], w, &layer.spec, &g, needs[*x], need_params)?
                    } else {
                        conv3d_grads(&tape.values[*x], w, &layer.spec, &g, needs[*x], need_params)?
                    };
                    if let Some(gw) = gw {
                        self.params.accumulate_grad(layer.weight, gw.data());
                    }
                    if let (Some(b), Some(gb)) = (layer.bias, gb) {
                        self.params.accumulate_grad(b, &gb);
                    }
                    if let Some(gi) = gi {
                        give(&mut grads, needs, *x, gi)?;
                    }
                }
                Op::Norm {
                    x,
                    layer,
                    mask,
                    cache,
                    ..
                } => {
                    let ng = masked_instance_norm_backward(
                        &tape.values[*x],
                        self.params.value(layer.gain).data(),
                        cache,
                        &g,
                        mask.map(|m| &tape.masks[m]),
                    )?;
                    if self.is_trainable(layer.gain) {
                        self.params.accumulate_grad(layer.gain, &ng.gain);
                        self.params.accumulate_grad(layer.shift, &ng.shift);
                    }
                    give(&mut grads, needs, *x, ng.input)?;
                }
                Op::Act { x, .. } => {
                    let gi = leaky_relu_backward(&tape.values[*x], &g, slope)?;
                    give(&mut grads, needs, *x, gi)?;
                }
                Op::Add { a, b, .. } => {
                    if needs[*b] {
                        give(&mut grads, needs, *b, g.clone())?;
                    }
                    give(&mut grads, needs, *a, g)?;
                }
                Op::Concat { a, b, .. } => {
                    let first = tape.values[*a].shape().channels();
                    let (ga, gb) = split_channels(&g, first);
                    give(&mut grads, needs, *a, ga)?;
                    give(&mut grads, needs, *b, gb)?;
                }
                Op::Densify { x, token, mask, .. } => {
                    let (gx, gt) = densify_backward(&g, &tape.masks[*mask])?;
                    if self.is_trainable(*token) {
                        self.params.accumulate_grad(*token, &gt);
                    }
                    give(&mut grads, needs, *x, gx)?;
                }
            }
        }
        Ok(())
    }
}
