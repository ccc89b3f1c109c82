//! Finite-difference verification of analytic backward passes.
//!
//! Each check contracts the op's output with a fixed random tensor `r`, so the
//! scalar under test is `L = <r, f(x)>` and its analytic gradient is the op's
//! backward applied to `r`. Everything runs in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::conv::{conv3d, conv3d_backward, conv3d_transpose, conv3d_transpose_backward, ConvSpec};
use crate::kernels::norm::{masked_instance_norm, masked_instance_norm_backward};
use crate::masking::VoxelMask;
use crate::sparse;
use crate::tensor::{Shape5, Tensor5};

/// Denominator floor of the relative error, so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;
pub const DEFAULT_STEP: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between `grads` and central differences of `loss` over every entry of `inputs`.
pub fn gradcheck<L>(inputs: &[Tensor5<f64>], grads: &[Tensor5<f64>], loss: L, step: f64) -> Result<f64>
where
    L: Fn(&[Tensor5<f64>]) -> Result<f64>,
{
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor5<f64>> = inputs.to_vec();
    for (t, g) in grads.iter().enumerate() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = loss(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = loss(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(g.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Result of one kernel check.
#[derive(Clone, Debug)]
pub struct KernelReport {
    pub kernel: &'static str,
    pub max_rel_error: f64,
}

fn vec_tensor(v: &[f64]) -> Tensor5<f64> {
    Tensor5::from_vec(Shape5::new(1, 1, 1, 1, v.len()), v.to_vec()).expect("length matches")
}

pub fn check_conv3d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::same(2, 2, 3, 1).with_bias(true);
    let x = Tensor5::<f64>::randn(Shape5::new(1, 2, 3, 3, 3), 1.0, &mut rng);
    let w = Tensor5::<f64>::randn(spec.weight_shape(), 0.5, &mut rng);
    let b = Tensor5::<f64>::randn(Shape5::new(1, 1, 1, 1, 2), 0.5, &mut rng);
    let y = conv3d(&x, &w, Some(b.data()), &spec)?;
    let r = Tensor5::<f64>::randn(y.shape(), 1.0, &mut rng);
    let g = conv3d_backward(&x, &w, &spec, &r, true)?;
    let grads = [g.input.unwrap(), g.weight, vec_tensor(&g.bias.unwrap())];
    gradcheck(&[x, w, b], &grads, |t| Ok(conv3d(&t[0], &t[1], Some(t[2].data()), &spec)?.dot(&r)), DEFAULT_STEP)
}

pub fn check_conv3d_strided(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::same(2, 3, 3, 2);
    let x = Tensor5::<f64>::randn(Shape5::new(2, 2, 4, 4, 4), 1.0, &mut rng);
    let w = Tensor5::<f64>::randn(spec.weight_shape(), 0.5, &mut rng);
    let y = conv3d(&x, &w, None, &spec)?;
    let r = Tensor5::<f64>::randn(y.shape(), 1.0, &mut rng);
    let g = conv3d_backward(&x, &w, &spec, &r, true)?;
    gradcheck(&[x, w], &[g.input.unwrap(), g.weight], |t| Ok(conv3d(&t[0], &t[1], None, &spec)?.dot(&r)), DEFAULT_STEP)
}

pub fn check_pointwise_conv(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::same(3, 2, 1, 1);
    let x = Tensor5::<f64>::randn(Shape5::new(1, 3, 2, 3, 2), 1.0, &mut rng);
    let w = Tensor5::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
    let y = conv3d(&x, &w, None, &spec)?;
    let r = Tensor5::<f64>::randn(y.shape(), 1.0, &mut rng);
    let g = conv3d_backward(&x, &w, &spec, &r, true)?;
    gradcheck(&[x, w], &[g.input.unwrap(), g.weight], |t| Ok(conv3d(&t[0], &t[1], None, &spec)?.dot(&r)), DEFAULT_STEP)
}

pub fn check_conv3d_transpose(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec {
        in_channels: 3,
        out_channels: 2,
        kernel: [2; 3],
        stride: [2; 3],
        padding: [0; 3],
        has_bias: true,
    };
    let x = Tensor5::<f64>::randn(Shape5::new(1, 3, 2, 2, 2), 1.0, &mut rng);
    let w = Tensor5::<f64>::randn(spec.transpose_weight_shape(), 0.5, &mut rng);
    let b = Tensor5::<f64>::randn(Shape5::new(1, 1, 1, 1, 2), 0.5, &mut rng);
    let y = conv3d_transpose(&x, &w, Some(b.data()), &spec)?;
    let r = Tensor5::<f64>::randn(y.shape(), 1.0, &mut rng);
    let g = conv3d_transpose_backward(&x, &w, &spec, &r, true)?;
    let grads = [g.input.unwrap(), g.weight, vec_tensor(&g.bias.unwrap())];
    gradcheck(
        &[x, w, b],
        &grads,
        |t| Ok(conv3d_transpose(&t[0], &t[1], Some(t[2].data()), &spec)?.dot(&r)),
        DEFAULT_STEP,
    )
}

fn norm_check(seed: u64, masked: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape5::new(2, 2, 3, 3, 3);
    let x = Tensor5::<f64>::randn(shape, 1.5, &mut rng);
    let gain = Tensor5::<f64>::uniform(Shape5::new(1, 1, 1, 1, 2), 0.5, 1.5, &mut rng);
    let shift = Tensor5::<f64>::randn(Shape5::new(1, 1, 1, 1, 2), 0.5, &mut rng);
    let mask = masked.then(|| random_mask(&mut rng, 2, [3, 3, 3]));
    let eps = 1e-5;
    let (y, cache) = masked_instance_norm(&x, gain.data(), shift.data(), eps, mask.as_ref())?;
    let r = Tensor5::<f64>::randn(y.shape(), 1.0, &mut rng);
    let g = masked_instance_norm_backward(&x, gain.data(), &cache, &r, mask.as_ref())?;
    gradcheck(
        &[x, gain, shift],
        &[g.input, vec_tensor(&g.gain), vec_tensor(&g.shift)],
        |t| Ok(masked_instance_norm(&t[0], t[1].data(), t[2].data(), eps, mask.as_ref())?.0.dot(&r)),
        DEFAULT_STEP,
    )
}

pub fn check_instance_norm(seed: u64) -> Result<f64> {
    norm_check(seed, false)
}

pub fn check_masked_instance_norm(seed: u64) -> Result<f64> {
    norm_check(seed, true)
}

/// Random mask with at least one unmasked voxel per sample.
fn random_mask(rng: &mut ChaCha8Rng, batch: usize, dims: [usize; 3]) -> VoxelMask {
    use rand::Rng;
    let n: usize = dims.iter().product();
    let mut bits: Vec<bool> = (0..batch * n).map(|_| rng.random_bool(0.5)).collect();
    for b in 0..batch {
        bits[b * n] = false;
        bits[b * n + n - 1] = true;
    }
    VoxelMask::new(batch, dims, bits).expect("sized")
}

pub fn check_sparse_conv3d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::same(2, 2, 3, 1).with_bias(true);
    let x = Tensor5::<f64>::randn(Shape5::new(1, 2, 3, 3, 3), 1.0, &mut rng);
    let w = Tensor5::<f64>::randn(spec.weight_shape(), 0.5, &mut rng);
    let b = Tensor5::<f64>::randn(Shape5::new(1, 1, 1, 1, 2), 0.5, &mut rng);
    let mask = random_mask(&mut rng, 1, [3, 3, 3]);
    let y = sparse::sparse_conv3d(&x, &w, Some(b.data()), &spec, &mask)?;
    let r = Tensor5::<f64>::randn(y.shape(), 1.0, &mut rng);
    let g = sparse::sparse_conv3d_backward(&x, &w, &spec, &r, &mask, true)?;
    let grads = [g.input.unwrap(), g.weight, vec_tensor(&g.bias.unwrap())];
    gradcheck(
        &[x, w, b],
        &grads,
        |t| Ok(sparse::sparse_conv3d(&t[0], &t[1], Some(t[2].data()), &spec, &mask)?.dot(&r)),
        DEFAULT_STEP,
    )
}

pub fn check_densify(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor5::<f64>::randn(Shape5::new(2, 3, 2, 3, 2), 1.0, &mut rng);
    let token = Tensor5::<f64>::randn(Shape5::new(1, 1, 1, 1, 3), 1.0, &mut rng);
    let mask = random_mask(&mut rng, 2, [2, 3, 2]);
    let y = sparse::densify(&x, &mask, token.data())?;
    let r = Tensor5::<f64>::randn(y.shape(), 1.0, &mut rng);
    let (gx, gt) = sparse::densify_backward(&r, &mask)?;
    gradcheck(
        &[x, token],
        &[gx, vec_tensor(&gt)],
        |t| Ok(sparse::densify(&t[0], &mask, t[1].data())?.dot(&r)),
        DEFAULT_STEP,
    )
}

pub fn check_leaky_relu(seed: u64) -> Result<f64> {
    use crate::kernels::act::{leaky_relu, leaky_relu_backward};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor5::<f64>::randn(Shape5::new(1, 2, 3, 3, 3), 1.0, &mut rng);
    // Keep away from the kink.
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 1e-3 {
            *v = 0.1;
        }
    });
    let r = Tensor5::<f64>::randn(x.shape(), 1.0, &mut rng);
    let g = leaky_relu_backward(&x, &r, 0.01)?;
    gradcheck(&[x], &[g], |t| Ok(leaky_relu(&t[0], 0.01).dot(&r)), DEFAULT_STEP)
}

pub fn check_masked_l2(seed: u64) -> Result<f64> {
    use crate::pretrain::{masked_l2_loss, masked_l2_loss_backward};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape5::new(2, 1, 3, 3, 3);
    let pred = Tensor5::<f64>::randn(shape, 1.0, &mut rng);
    let target = Tensor5::<f64>::randn(shape, 1.0, &mut rng);
    let mask = random_mask(&mut rng, 2, [3, 3, 3]);
    let g = masked_l2_loss_backward(&pred, &target, &mask)?;
    gradcheck(&[pred], &[g], |t| masked_l2_loss(&t[0], &target, &mask), DEFAULT_STEP)
}

pub fn check_dice_ce(seed: u64) -> Result<f64> {
    use crate::finetune::dice_ce_loss;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor5::<f64>::randn(Shape5::new(1, 2, 4, 4, 4), 1.0, &mut rng);
    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..2u8)).collect();
    let (_, g) = dice_ce_loss(&logits, &labels)?;
    gradcheck(&[logits], &[g], |t| Ok(dice_ce_loss(&t[0], &labels)?.0), DEFAULT_STEP)
}

type Check = fn(u64) -> Result<f64>;

/// Every kernel check, by name.
pub const KERNEL_CHECKS: [(&str, Check); 11] = [
    ("conv3d", check_conv3d),
    ("conv3d_strided", check_conv3d_strided),
    ("conv3d_pointwise", check_pointwise_conv),
    ("conv3d_transpose", check_conv3d_transpose),
    ("instance_norm", check_instance_norm),
    ("masked_instance_norm", check_masked_instance_norm),
    ("sparse_conv3d", check_sparse_conv3d),
    ("densify", check_densify),
    ("leaky_relu", check_leaky_relu),
    ("masked_l2_loss", check_masked_l2),
    ("dice_ce_loss", check_dice_ce),
];

/// Runs every kernel check over `seeds` and reports the worst error per kernel.
pub fn run_kernel_suite(seeds: std::ops::Range<u64>) -> Result<Vec<KernelReport>> {
    KERNEL_CHECKS
        .iter()
        .map(|&(kernel, check)| {
            let mut worst = 0.0f64;
            for s in seeds.clone() {
                worst = worst.max(check(s)?);
            }
            Ok(KernelReport {
                kernel,
                max_rel_error: worst,
            })
        })
        .collect()
}
