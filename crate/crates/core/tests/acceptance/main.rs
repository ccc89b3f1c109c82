//! Acceptance suite. Runs every criterion in order (so wall-clock budgets are
//! measured without contention) and prints one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- 6 7` runs a subset by number.

mod oracle;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mae3d::data::synth::{synth_dataset, PhantomConfig};
use mae3d::data::{filter_dataset, parse_manifest, preprocess, preprocess_case, DiscardReason, Volume};
use mae3d::finetune::{
    build_schedule, init_network, run_finetune, FinetuneConfig, PhaseKind, ScheduleSpec, DICE_SMOOTH,
};
use mae3d::gradcheck::run_kernel_suite;
use mae3d::kernels::{conv3d, conv3d_backward, conv3d_transpose, masked_instance_norm, ConvSpec};
use mae3d::masking::{rescale_mask, sample_mask, MaskGrid, RatioSpec, VoxelMask};
use mae3d::metrics::{bootstrap_ranks, dsc, nsd, DatasetScores, LabelRaster, ScoreTable};
use mae3d::network::{
    build_network, load_checkpoint, save_checkpoint, Checkpoint, Network, NetworkConfig, StemPolicy, TrainingMeta,
};
use mae3d::par::set_parallel;
use mae3d::params::Component;
use mae3d::pretrain::{
    evaluate_reconstruction, masked_l2_loss, run_pretraining, PretrainConfig, Pretrainer, ScalePreset, StepRecord,
};
use mae3d::sparse::{densify, sparse_conv3d};
use mae3d::tensor::{Shape5, Tensor5};
use oracle::{Arr, Geometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn arr(t: &Tensor5<f64>) -> Arr {
    Arr {
        dims: t.shape().0,
        data: t.data().to_vec(),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_voxel_mask(rng: &mut ChaCha8Rng, batch: usize, dims: [usize; 3]) -> (VoxelMask, Vec<Vec<bool>>) {
    let n: usize = dims.iter().product();
    let p = rng.random_range(0.2..0.8);
    let mut planes: Vec<Vec<bool>> = (0..batch).map(|_| (0..n).map(|_| rng.random_bool(p)).collect()).collect();
    for plane in &mut planes {
        // At least one masked and one visible voxel per sample.
        plane[0] = true;
        plane[n - 1] = false;
    }
    let vm = VoxelMask::new(batch, dims, planes.concat()).expect("sized");
    (vm, planes)
}

// ---- 1 ----

fn kernel_correctness() -> Outcome {
    let seeds = 20u64;
    let reports = ok(run_kernel_suite(0..seeds))?;
    let mut worst_fd: f64 = 0.0;
    for r in &reports {
        ensure!(r.max_rel_error < 1e-3, "finite differences: {} at {:.2e}", r.kernel, r.max_rel_error);
        worst_fd = worst_fd.max(r.max_rel_error);
    }
    for needed in [
        "conv3d",
        "conv3d_transpose",
        "instance_norm",
        "masked_instance_norm",
        "sparse_conv3d",
        "densify",
        "masked_l2_loss",
        "dice_ce_loss",
    ] {
        ensure!(reports.iter().any(|r| r.kernel == needed), "no finite-difference check for {needed}");
    }

    let mut worst = [0.0f64; 8];
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let batch = rng.random_range(1..3);
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let dims = [rng.random_range(3..7), rng.random_range(3..7), rng.random_range(3..7)];
        let k = [1, 2, 3][rng.random_range(0..3)];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..k);
        let spec = ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [pad; 3],
            has_bias: true,
        };
        let geo = Geometry {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [pad; 3],
        };
        let x = Tensor5::<f64>::randn(Shape5::new(batch, cin, dims[0], dims[1], dims[2]), 1.0, &mut rng);
        let w = Tensor5::<f64>::randn(spec.weight_shape(), 0.5, &mut rng);
        let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();

        // conv3d, forward and the adjoint identities of its backward pass.
        let y = ok(conv3d(&x, &w, Some(&bias), &spec))?;
        let yo = oracle::conv(&arr(&x), &arr(&w), Some(&bias), &geo);
        ensure!(y.shape().0 == yo.dims, "conv3d shape {:?} vs {:?}", y.shape().0, yo.dims);
        worst[0] = worst[0].max(max_diff(y.data(), &yo.data));
        let r = Tensor5::<f64>::randn(y.shape(), 1.0, &mut rng);
        let g = ok(conv3d_backward(&x, &w, &spec, &r, true))?;
        // <conv(x, w), r> is linear in x and in w: gradients are the oracle
        // applied to unit perturbations, checked here on random directions.
        let dx = Tensor5::<f64>::randn(x.shape(), 1.0, &mut rng);
        let dw = Tensor5::<f64>::randn(w.shape(), 1.0, &mut rng);
        let lin = |a: &Arr| a.data.iter().zip(r.data()).map(|(p, q)| p * q).sum::<f64>();
        let along_x = lin(&oracle::conv(&arr(&dx), &arr(&w), None, &geo));
        let along_w = lin(&oracle::conv(&arr(&x), &arr(&dw), None, &geo));
        let gx = g.input.as_ref().expect("input grad").dot(&dx);
        let gw = g.weight.dot(&dw);
        let scale = along_x.abs().max(along_w.abs()).max(1.0);
        worst[0] = worst[0].max((gx - along_x).abs() / scale).max((gw - along_w).abs() / scale);

        // Transposed convolution.
        let tspec = ConvSpec { padding: [0; 3], ..spec };
        let tgeo = Geometry {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [0; 3],
        };
        let tw = Tensor5::<f64>::randn(tspec.transpose_weight_shape(), 0.5, &mut rng);
        let ty = ok(conv3d_transpose(&x, &tw, Some(&bias), &tspec))?;
        let tyo = oracle::conv_transpose(&arr(&x), &arr(&tw), Some(&bias), &tgeo);
        ensure!(ty.shape().0 == tyo.dims, "conv3d_transpose shape");
        worst[1] = worst[1].max(max_diff(ty.data(), &tyo.data));

        // Normalization, plain and masked.
        let gain: Vec<f64> = (0..cin).map(|_| rng.random_range(0.5..1.5)).collect();
        let shift: Vec<f64> = (0..cin).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (n1, _) = ok(masked_instance_norm(&x, &gain, &shift, 1e-5, None))?;
        worst[2] = worst[2].max(max_diff(n1.data(), &oracle::instance_norm(&arr(&x), &gain, &shift, 1e-5, None).data));
        let (vm, masked) = random_voxel_mask(&mut rng, batch, dims);
        let keep: Vec<Vec<bool>> = masked.iter().map(|p| p.iter().map(|m| !m).collect()).collect();
        let (n2, _) = ok(masked_instance_norm(&x, &gain, &shift, 1e-5, Some(&vm)))?;
        let n2o = oracle::instance_norm(&arr(&x), &gain, &shift, 1e-5, Some(&keep));
        worst[3] = worst[3].max(max_diff(n2.data(), &n2o.data));

        // Sparse convolution at stride 1 with "same" padding.
        let sspec = ConvSpec::same(cin, cout, 3, 1).with_bias(true);
        let sgeo = Geometry {
            kernel: [3; 3],
            stride: [1; 3],
            padding: [1; 3],
        };
        let sw = Tensor5::<f64>::randn(sspec.weight_shape(), 0.5, &mut rng);
        let sy = ok(sparse_conv3d(&x, &sw, Some(&bias), &sspec, &vm))?;
        let syo = oracle::zero_masked(&oracle::conv(&arr(&x), &arr(&sw), Some(&bias), &sgeo), &masked);
        worst[4] = worst[4].max(max_diff(sy.data(), &syo.data));

        // Densification.
        let token: Vec<f64> = (0..cin).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy = ok(densify(&x, &vm, &token))?;
        worst[5] = worst[5].max(max_diff(dy.data(), &oracle::densify(&arr(&x), &masked, &token).data));

        // Losses.
        let target = Tensor5::<f64>::randn(x.shape(), 1.0, &mut rng);
        let l2 = ok(masked_l2_loss(&x, &target, &vm))?;
        worst[6] = worst[6].max((l2 - oracle::masked_l2(&arr(&x), &arr(&target), &masked)).abs());
        let classes = cout.max(2);
        let logits = Tensor5::<f64>::randn(Shape5::new(batch, classes, dims[0], dims[1], dims[2]), 2.0, &mut rng);
        let labels: Vec<u8> = (0..batch * dims.iter().product::<usize>())
            .map(|_| rng.random_range(0..classes as u8))
            .collect();
        let (dce, _) = ok(mae3d::finetune::dice_ce_loss(&logits, &labels))?;
        worst[7] = worst[7].max((dce - oracle::dice_ce(&arr(&logits), &labels, DICE_SMOOTH)).abs());
    }
    let names = [
        "conv3d",
        "conv3d_transpose",
        "instance_norm",
        "masked_instance_norm",
        "sparse_conv3d",
        "densify",
        "masked_l2_loss",
        "dice_ce_loss",
    ];
    for (name, w) in names.iter().zip(worst) {
        ensure!(w < 1e-5, "loop oracle: {name} differs by {w:.2e}");
    }
    let worst_oracle = worst.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "{} kernels x {seeds} seeds; max FD rel err {worst_fd:.1e}, max oracle diff {worst_oracle:.1e}",
        reports.len()
    ))
}

// ---- 2 ----

fn zero_mask_collapse() -> Outcome {
    let cfg = NetworkConfig::toy();
    let s = cfg.sparsification;
    ensure!(s.sparse_conv_norm && s.mask_token && s.dens_conv, "toy preset lacks full sparsification");
    let net = ok(build_network::<f32>(&cfg))?;
    let grid = ok(cfg.bottleneck())?;
    let [d, h, w] = cfg.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = Tensor5::<f32>::randn(Shape5::new(1, 1, d, h, w), 1.0, &mut rng);
        let sparse = ok(net.forward_sparse(&x, &[MaskGrid::empty(grid)]))?;
        let dense = ok(net.forward_recon_dense(&x))?;
        for (a, b) in sparse.data().iter().zip(dense.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    ensure!(worst <= 1e-6, "max |sparse - dense| = {worst:.2e}");
    Ok(format!("10 inputs, max |sparse - dense| = {worst:.1e}"))
}

// ---- 3 ----

fn no_leakage() -> Outcome {
    let cfg = NetworkConfig::toy();
    let net = ok(build_network::<f32>(&cfg))?;
    let grid = ok(cfg.bottleneck())?;
    let stage_dims = ok(cfg.stage_dims())?;
    let patch = cfg.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut compared = 0usize;
    for ratio in [0.3, 0.6, 0.75, 0.9] {
        for _ in 0..2 {
            let grids: Vec<MaskGrid> = (0..2)
                .map(|_| sample_mask(grid, RatioSpec::Static(ratio), &mut rng))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let vm = ok(VoxelMask::from_grids(&grids, patch))?;
            let a = Tensor5::<f32>::randn(Shape5::new(2, 1, patch[0], patch[1], patch[2]), 1.0, &mut rng);
            let mut b = a.clone();
            for (v, &m) in b.data_mut().iter_mut().zip(vm.data()) {
                if m {
                    *v = rng.random_range(-50.0..50.0);
                }
            }
            let fa = ok(net.encoder_features(&a, Some(&grids)))?;
            let fb = ok(net.encoder_features(&b, Some(&grids)))?;
            ensure!(fa.len() == stage_dims.len() - 1 || fa.len() == stage_dims.len(), "unexpected stage count");
            for (ta, tb) in fa.iter().zip(&fb) {
                let sp = ta.shape();
                let n = sp.spatial_len();
                for item in 0..2 {
                    let masked = ok(rescale_mask(&grids[item], sp.spatial()))?;
                    for c in 0..sp.channels() {
                        let (pa, pb) = (ta.plane(item, c), tb.plane(item, c));
                        for i in 0..n {
                            if !masked[i] {
                                worst = worst.max((pa[i] - pb[i]).abs() as f64);
                                compared += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    ensure!(compared > 0, "no unmasked voxels compared");
    ensure!(worst < 1e-5, "unmasked encoder outputs moved by {worst:.2e}");
    Ok(format!("ratios 0.3/0.6/0.75/0.9, {compared} unmasked outputs, max change {worst:.1e}"))
}

// ---- 4 ----

fn mask_geometry() -> Outcome {
    let cfg = PretrainConfig::preset(ScalePreset::S3dB);
    let bottleneck = ok(cfg.network.bottleneck())?;
    ensure!(bottleneck == [5; 3], "bottleneck {bottleneck:?}");
    ensure!(cfg.network.patch_size == [160; 3], "patch {:?}", cfg.network.patch_size);
    let grid = ok(cfg.grid_shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = ok(sample_mask(grid, cfg.ratio, &mut rng))?;
    let voxels = ok(rescale_mask(&mask, [160; 3]))?;
    for z in 0..160 {
        for y in 0..160 {
            for x in 0..160 {
                let cell = mask.cells()[((z / 32) * 5 + y / 32) * 5 + x / 32];
                ensure!(voxels[(z * 160 + y) * 160 + x] == cell, "voxel ({z},{y},{x}) outside its 32^3 block");
            }
        }
    }
    let dynamic = RatioSpec::Dynamic { lo: 0.6, hi: 0.9 };
    let draws: Vec<f64> = (0..10_000)
        .map(|_| sample_mask(grid, dynamic, &mut rng).map(|m| m.sampled_ratio()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let (lo, hi) = draws.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    ensure!((mean - 0.75).abs() <= 0.01, "dynamic mean {mean:.4}");
    ensure!(lo >= 0.6 && hi <= 0.9, "dynamic support [{lo:.4}, {hi:.4}]");
    Ok(format!(
        "bottleneck 5^3, 32^3 blocks; dynamic mean {mean:.4}, range [{lo:.3}, {hi:.3}]"
    ))
}

// ---- 5 ----

fn analytic_lr(step: u64, peak: f64, warm: u64, total: u64) -> f64 {
    if step < warm {
        peak * (step as f64 / warm as f64)
    } else if step < 2 * warm {
        peak * ((step - warm) as f64 / warm as f64)
    } else {
        let main = total - 2 * warm;
        peak * (1.0 - (step - 2 * warm) as f64 / main as f64).powf(0.9)
    }
}

fn toy_seg_cases(n: usize, seed: u64, prefix: &str) -> Vec<mae3d::data::SegCase> {
    let cfg = PhantomConfig {
        blob_radius: [4.0, 6.0],
        ..PhantomConfig::default()
    };
    synth_dataset(&cfg, n, seed, prefix)
        .iter()
        .map(|c| preprocess_case(c, None).expect("phantoms preprocess"))
        .collect()
}

fn schedule_fidelity() -> Outcome {
    let spec = ScheduleSpec::best();
    let total = 250_000;
    let schedule = ok(build_schedule(&spec, total))?;
    ensure!(schedule.boundaries() == vec![12_500, 25_000], "boundaries {:?}", schedule.boundaries());
    let kinds: Vec<PhaseKind> = schedule.phases.iter().map(|p| p.kind).collect();
    ensure!(
        kinds == [PhaseKind::DecoderWarmup, PhaseKind::FullWarmup, PhaseKind::Main],
        "phases {kinds:?}"
    );
    for step in 0..total {
        let lr = ok(schedule.lr_at(step))?;
        let want = analytic_lr(step, spec.peak_lr, 12_500, total);
        ensure!(lr == want, "lr at step {step}: {lr:e} vs {want:e}");
    }
    let frozen_dw = ok(schedule.frozen_at(12_499))?;
    ensure!(
        frozen_dw.contains(&Component::Encoder) && frozen_dw.contains(&Component::Stem),
        "encoder or stem trainable during decoder warm-up"
    );
    ensure!(!ok(schedule.frozen_at(12_500))?.contains(&Component::Encoder), "encoder frozen after 12.5k");

    // A realized run at toy scale: trace and frozen tensors.
    let mut cfg = FinetuneConfig::toy(2);
    cfg.schedule = ScheduleSpec {
        warmup_steps: 6,
        ..ScheduleSpec::best()
    };
    cfg.steps = 24;
    cfg.val_every = 24;
    let mut pre_cfg = NetworkConfig::toy();
    pre_cfg.seed = 55;
    let ckpt = ok(Checkpoint::from_network(&ok(build_network(&pre_cfg))?, TrainingMeta::default(), None))?;
    let frozen_names: Vec<String> = ok(build_network::<f32>(&cfg.network))?
        .params()
        .iter()
        .filter(|p| matches!(p.component, Component::Stem | Component::Encoder))
        .map(|p| p.name.clone())
        .collect();
    let mut violations = Vec::new();
    let mut decoder_moved = false;
    let mut hook = |step: u64, net: &Network<f32>| {
        for name in &frozen_names {
            let now = &net.params().by_name(name).expect("param").value;
            let orig = ckpt.tensor(name).expect("transferred").1;
            if step < 6 && now != orig {
                violations.push(format!("{name} changed at step {step}"));
            }
        }
        if step == 5 {
            let p = net.params().by_name("decoder.s0.c0.conv.weight").expect("param");
            decoder_moved = &p.value != ckpt.tensor("decoder.s0.c0.conv.weight").expect("present").1;
        }
    };
    let train = toy_seg_cases(3, 501, "t");
    let val = toy_seg_cases(1, 502, "v");
    let outcome = ok(run_finetune(&cfg, Some(&ckpt), &train, &val, &mut hook))?;
    ensure!(violations.is_empty(), "{}", violations.join("; "));
    ensure!(decoder_moved, "decoder did not train during its warm-up");
    for (step, &lr) in outcome.lr_trace.iter().enumerate() {
        let want = analytic_lr(step as u64, cfg.schedule.peak_lr, 6, 24);
        ensure!(lr == want, "realized lr at step {step}: {lr:e} vs {want:e}");
    }
    let moved = frozen_names
        .iter()
        .any(|n| &outcome.net.params().by_name(n).expect("param").value != ckpt.tensor(n).expect("present").1);
    ensure!(moved, "encoder never trained after the decoder warm-up");
    Ok("250k-step trace exact, boundaries 12.5k/25k, encoder and stem bitwise frozen in decoder warm-up".into())
}

// ---- 6 ----

static PRETRAINED: OnceLock<Checkpoint> = OnceLock::new();

fn texture_volumes(n: usize, seed: u64, prefix: &str) -> Vec<Volume> {
    synth_dataset(&PhantomConfig::default(), n, seed, prefix)
        .iter()
        .map(|c| preprocess(&c.image, None).expect("phantoms preprocess"))
        .collect()
}

fn toy_pretrained() -> Result<Checkpoint, String> {
    if let Some(c) = PRETRAINED.get() {
        return Ok(c.clone());
    }
    let cfg = PretrainConfig::preset(ScalePreset::Toy);
    let train = texture_volumes(200, 1, "tex");
    let mut t = ok(Pretrainer::new(cfg))?;
    while !t.done() {
        ok(t.train_step(&train))?;
    }
    let ckpt = ok(t.checkpoint())?;
    let _ = PRETRAINED.set(ckpt.clone());
    Ok(ckpt)
}

fn toy_pretraining() -> Outcome {
    let start = Instant::now();
    let cfg = PretrainConfig::preset(ScalePreset::Toy);
    ensure!(cfg.steps == 2000 && cfg.network.patch_size == [32; 3], "toy preset changed");
    let ckpt = toy_pretrained()?;
    let net = ok(ckpt.to_network())?;
    let held_out = texture_volumes(20, 77, "held");
    let eval = ok(evaluate_reconstruction(&net, &held_out, cfg.ratio, 6))?;
    let ratio = eval.model_mse / eval.mean_predictor_mse;
    let secs = start.elapsed().as_secs_f64();
    ensure!(ratio < 0.5, "masked MSE {:.4} is {ratio:.3} of the baseline {:.4}", eval.model_mse, eval.mean_predictor_mse);
    ensure!(secs < 900.0, "took {secs:.0} s");
    Ok(format!(
        "held-out masked MSE {:.4} vs mean-predictor {:.4} (ratio {ratio:.3})",
        eval.model_mse, eval.mean_predictor_mse
    ))
}

// ---- 7 ----

fn toy_transfer() -> Outcome {
    let start = Instant::now();
    let ckpt = toy_pretrained()?;
    let train = toy_seg_cases(5, 1001, "ft");
    let val = toy_seg_cases(10, 2002, "val");
    let mut lines = Vec::new();
    let (mut pre_sum, mut scr_sum) = (0.0, 0.0);
    for seed in 0..3 {
        let mut pre = FinetuneConfig::toy(2);
        pre.seed = seed;
        let mut scratch = pre.clone();
        scratch.schedule = ScheduleSpec {
            peak_lr: pre.schedule.peak_lr,
            ..ScheduleSpec::scratch()
        };
        let final_dice = |cfg: &FinetuneConfig, ck: Option<&Checkpoint>| -> Result<f64, String> {
            let o = ok(run_finetune(cfg, ck, &train, &val, &mut ()))?;
            Ok(o.val_log.last().expect("final validation").mean_dice)
        };
        let p = final_dice(&pre, Some(&ckpt))?;
        let s = final_dice(&scratch, None)?;
        pre_sum += p;
        scr_sum += s;
        lines.push(format!("seed {seed}: {p:.3} vs {s:.3}"));
    }
    let (p, s) = (pre_sum / 3.0, scr_sum / 3.0);
    let secs = start.elapsed().as_secs_f64();
    ensure!(p >= s - 0.02, "pretrained {p:.4} < scratch {s:.4} - 0.02 ({})", lines.join(", "));
    ensure!(secs < 1800.0, "took {secs:.0} s");
    Ok(format!("mean Dice pretrained {p:.4} vs scratch {s:.4} ({})", lines.join(", ")))
}

// ---- 8 ----

fn stem_identity() -> Outcome {
    let mut src_cfg = NetworkConfig::toy();
    src_cfg.seed = 8;
    let ckpt = ok(Checkpoint::from_network(&ok(build_network(&src_cfg))?, TrainingMeta::default(), None))?;
    let make = |k: usize| -> Result<Network<f32>, String> {
        let mut cfg = FinetuneConfig::toy(2);
        cfg.network.in_channels = k;
        cfg.stem_policy = StemPolicy::ReplicateScaled;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(ok(init_network(&cfg, Some(&ckpt), &mut rng))?.0)
    };
    let single = make(1)?;
    let [d, h, w] = src_cfg.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let x = Tensor5::<f32>::randn(Shape5::new(2, 1, d, h, w), 1.0, &mut rng);
    let reference = ok(single.forward_dense_tape(&x))?;
    let mut worst: f64 = 0.0;
    for k in [2, 3, 4] {
        let multi = make(k)?;
        let mut data = Vec::new();
        for b in 0..2 {
            for _ in 0..k {
                data.extend_from_slice(x.plane(b, 0));
            }
        }
        let xk = ok(Tensor5::from_vec(Shape5::new(2, k, d, h, w), data))?;
        let tape = ok(multi.forward_dense_tape(&xk))?;
        let (a, b) = (reference.stem_conv_output(), tape.stem_conv_output());
        ensure!(a.shape() == b.shape(), "stem output shapes differ");
        for (u, v) in a.data().iter().zip(b.data()) {
            worst = worst.max((u - v).abs() as f64);
        }
    }
    ensure!(worst < 1e-5, "first-layer activations differ by {worst:.2e}");
    Ok(format!("K = 2, 3, 4: max first-layer difference {worst:.1e}"))
}

// ---- 9 ----

fn random_mask_12(rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = 12 * 12 * 12;
    match rng.random_range(0..10) {
        0 => vec![false; n],
        1..=3 => {
            let p = rng.random_range(0.05..0.95);
            (0..n).map(|_| rng.random_bool(p)).collect()
        }
        _ => {
            let mut m = vec![false; n];
            for _ in 0..rng.random_range(1..4) {
                let c = [rng.random_range(0.0..12.0), rng.random_range(0.0..12.0), rng.random_range(0.0..12.0)];
                let r: f64 = rng.random_range(1.0..5.0);
                for z in 0..12 {
                    for y in 0..12 {
                        for x in 0..12 {
                            let d2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
                            if d2 <= r * r {
                                m[(z * 12 + y) * 12 + x] = true;
                            }
                        }
                    }
                }
            }
            m
        }
    }
}

fn metrics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = [12; 3];
    let mut worst_nsd: f64 = 0.0;
    for i in 0..200 {
        let (p, g) = (random_mask_12(&mut rng), random_mask_12(&mut rng));
        let spacing = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let tau = rng.random_range(0.3..3.0);
        let raster = |m: &[bool]| LabelRaster::new(dims, spacing, m.iter().map(|&b| b as u8).collect());
        let (rp, rg) = (ok(raster(&p))?, ok(raster(&g))?);
        let d = ok(dsc(&rp, &rg, 1))?;
        let want = oracle::dice(&p, &g);
        ensure!(d == want, "pair {i}: dsc {d} vs {want}");
        let s = ok(nsd(&rp, &rg, 1, tau))?;
        let want = oracle::nsd(&p, &g, dims, spacing, tau);
        worst_nsd = worst_nsd.max((s - want).abs());
        ensure!((s - want).abs() < 1e-9, "pair {i}: nsd {s} vs {want}");
    }

    // Bootstrap against the reimplementation, with deliberate ties.
    let methods = 4;
    let case_counts = [7usize, 12, 5];
    let mut raw: Vec<Vec<Vec<f64>>> = Vec::new();
    for &n in &case_counts {
        raw.push(
            (0..methods)
                .map(|_| (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 10.0).round() / 10.0).collect())
                .collect(),
        );
    }
    let table = |raw: &[Vec<Vec<f64>>]| ScoreTable {
        metric: "dsc".into(),
        methods: (0..methods).map(|m| format!("m{m}")).collect(),
        datasets: raw
            .iter()
            .enumerate()
            .map(|(d, s)| DatasetScores {
                name: format!("d{d}"),
                cases: (0..s[0].len()).map(|c| format!("c{c}")).collect(),
                scores: s.clone(),
            })
            .collect(),
    };
    let n_boot = 500;
    let summary = ok(bootstrap_ranks(&table(&raw), n_boot, &mut ChaCha8Rng::seed_from_u64(99)))?;
    let reference = oracle::bootstrap(&raw, n_boot, &mut ChaCha8Rng::seed_from_u64(99));
    ensure!(summary.replicates == reference, "bootstrap replicates differ from the reimplementation");

    let mut dominant = raw.clone();
    for ds in &mut dominant {
        let best: Vec<f64> = (0..ds[0].len())
            .map(|c| ds.iter().map(|m| m[c]).fold(f64::NEG_INFINITY, f64::max) + 0.05)
            .collect();
        ds[0] = best;
    }
    let dom = ok(bootstrap_ranks(&table(&dominant), n_boot, &mut ChaCha8Rng::seed_from_u64(5)))?;
    ensure!(dom.p_first(0) == 1.0, "dominant method first with p = {}", dom.p_first(0));
    Ok(format!(
        "200 pairs: dsc exact, max nsd diff {worst_nsd:.1e}; {n_boot} bootstrap replicates identical; dominant p_first = 1"
    ))
}

// ---- 10 ----

fn curation_filter() -> Outcome {
    // (line, expected reason)
    let rows: [(&str, Option<DiscardReason>); 12] = [
        ("fov_exact.nii\t50,60,60\t1,1,1\t300000\tT1", None),
        ("fov_under.nii\t49,60,60\t1,1,1\t300000\tT1", Some(DiscardReason::Fov)),
        ("fov_aniso.nii\t10,100,100\t5,1,1\t300000\tT2", None),
        ("fov_thin.nii\t200,200,99\t1,1,0.5\t300000\tT2", Some(DiscardReason::Fov)),
        ("sp_exact.nii\t10,10,10\t6.5,6.5,6.5\t300000\tT1FLAIR", None),
        ("sp_over.nii\t60,60,10\t1,1,6.51\t300000\tT1", Some(DiscardReason::Spacing)),
        ("size_exact.nii\t100,100,100\t1,1,1\t204800\tT2FLAIR", None),
        ("size_under.nii\t100,100,100\t1,1,1\t204799\tT1", Some(DiscardReason::FileSize)),
        ("ct.nii\t100,100,100\t1,1,1\t300000\tCT", Some(DiscardReason::Modality)),
        ("dwi.nii\t100,100,100\t1,1,1\t300000\tDWI", Some(DiscardReason::Modality)),
        ("fov_and_sp.nii\t5,5,5\t7,7,7\t100\tCT", Some(DiscardReason::Fov)),
        ("sp_and_size.nii\t20,20,20\t7,7,7\t100\tT1", Some(DiscardReason::Spacing)),
    ];
    let text: String = rows.iter().map(|(l, _)| format!("{l}\n")).collect();
    let records = ok(parse_manifest(&text))?;
    ensure!(records.len() == 12, "parsed {} records", records.len());
    let out = filter_dataset(&records);
    let kept: BTreeSet<String> = out.kept.iter().map(|r| r.path.display().to_string()).collect();
    for (line, want) in &rows {
        let name = line.split('\t').next().expect("path");
        let got = out
            .discarded
            .iter()
            .find(|(r, _)| r.path.display().to_string() == name)
            .map(|(_, why)| *why);
        ensure!(got == *want, "{name}: expected {want:?}, got {got:?}");
        ensure!(kept.contains(name) == want.is_none(), "{name}: kept set disagrees");
    }
    Ok(format!("{} kept, {} discarded, every rule and boundary as expected", out.kept.len(), out.discarded.len()))
}

// ---- 11 ----

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let volumes = texture_volumes(6, 11, "det");
    let mut cfg = PretrainConfig::preset(ScalePreset::Toy);
    cfg.steps = 16;
    cfg.checkpoint_every = 8;
    cfg.seed = 7;

    let a = ok(run_pretraining(&cfg, &volumes, &dir.path().join("a"), false))?;
    let b = ok(run_pretraining(&cfg, &volumes, &dir.path().join("b"), false))?;
    let log_a = std::fs::read(&a.log).map_err(|e| e.to_string())?;
    ensure!(log_a == std::fs::read(&b.log).map_err(|e| e.to_string())?, "pretraining logs differ");

    let mut ft = FinetuneConfig::toy(2);
    ft.schedule = ScheduleSpec::scratch();
    ft.steps = 6;
    ft.val_every = 3;
    let train = toy_seg_cases(3, 111, "t");
    let val = toy_seg_cases(1, 112, "v");
    let fa = ok(run_finetune(&ft, None, &train, &val, &mut ()))?;
    let fb = ok(run_finetune(&ft, None, &train, &val, &mut ()))?;
    ensure!(fa.losses == fb.losses && fa.val_log == fb.val_log, "fine-tuning logs differ");

    // save -> load -> save
    let first = ok(load_checkpoint(&a.checkpoint))?;
    let path2 = dir.path().join("again.s3dc");
    ok(save_checkpoint(&first, &path2))?;
    let bytes1 = std::fs::read(&a.checkpoint).map_err(|e| e.to_string())?;
    let bytes2 = std::fs::read(&path2).map_err(|e| e.to_string())?;
    ensure!(bytes1 == bytes2, "checkpoint bytes changed across save/load/save");

    // Interrupted at step 8, resumed from disk, against the straight run.
    let mut t = ok(Pretrainer::new(cfg.clone()))?;
    let mut records: Vec<StepRecord> = Vec::new();
    for _ in 0..8 {
        records.push(ok(t.train_step(&volumes))?);
    }
    let mid = dir.path().join("mid.s3dc");
    ok(save_checkpoint(&ok(t.checkpoint())?, &mid))?;
    drop(t);
    let mut resumed = ok(Pretrainer::resume(cfg.clone(), &ok(load_checkpoint(&mid))?))?;
    while !resumed.done() {
        records.push(ok(resumed.train_step(&volumes))?);
    }
    ensure!(records == a.records, "resumed trajectory differs from the uninterrupted run");
    let final_bytes = ok(ok(resumed.checkpoint())?.to_bytes())?;
    ensure!(final_bytes == bytes1, "resumed final checkpoint differs");

    // The run-level resume path: a crash after step 8 leaves the mid-run
    // checkpoint next to a log that ran ahead of it.
    let c_dir = dir.path().join("c");
    std::fs::create_dir_all(&c_dir).map_err(|e| e.to_string())?;
    std::fs::copy(&mid, c_dir.join(mae3d::pretrain::LATEST_CHECKPOINT)).map_err(|e| e.to_string())?;
    std::fs::write(c_dir.join(mae3d::pretrain::LOG_FILE), &log_a).map_err(|e| e.to_string())?;
    let c = ok(run_pretraining(&cfg, &volumes, &c_dir, true))?;
    ensure!(std::fs::read(&c.log).map_err(|e| e.to_string())? == log_a, "resumed log differs");
    Ok("identical pretraining and fine-tuning logs; checkpoint round trip byte-identical; resume exact".into())
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "kernel correctness", kernel_correctness),
    (2, "zero-mask collapse", zero_mask_collapse),
    (3, "no leakage from masked voxels", no_leakage),
    (4, "mask geometry", mask_geometry),
    (5, "schedule fidelity", schedule_fidelity),
    (6, "toy pretraining", toy_pretraining),
    (7, "toy transfer is non-harmful", toy_transfer),
    (8, "stem adaptation identity", stem_identity),
    (9, "metrics and bootstrap ranks", metrics_oracles),
    (10, "curation filter", curation_filter),
    (11, "determinism and persistence", determinism_and_persistence),
];

/// Wall-clock budgets, where stated.
fn budget(id: u32) -> Option<Duration> {
    match id {
        1 => Some(Duration::from_secs(120)),
        6 => Some(Duration::from_secs(15 * 60)),
        7 => Some(Duration::from_secs(30 * 60)),
        _ => None,
    }
}

fn main() {
    // Internal parallelism off; results do not depend on it.
    set_parallel(false);
    // Numeric arguments select criteria; other arguments are test-name
    // filters from `cargo test <filter>` and select nothing here.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Option<BTreeSet<u32>> = if args.is_empty() {
        None
    } else {
        Some(args.iter().filter_map(|a| a.parse().ok()).collect())
    };
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, run) in CRITERIA {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, budget(id)) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("over budget ({:.0} s > {} s)", elapsed.as_secs_f64(), b.as_secs())),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} [{tag}] {name}: {detail} ({:.1} s)", elapsed.as_secs_f64());
        if result.is_err() {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
