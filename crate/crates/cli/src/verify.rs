//! Invariant suites behind `pvm verify`.

use std::collections::VecDeque;
use std::time::Instant;

use anyhow::Result;
use pvm_core::autodiff::{check_primitives, grad_check, weighted_sum_loss, Tape, GRAD_CHECK_STEP};
use pvm_core::datagen::{stream_rng, ChaCha8Rng, Stream};
use pvm_core::mask::{oracle_receptive_field, propagate_receptive_field, KernelFootprint, ScanDirection, ValidityRule};
use pvm_core::models::{cls_forward, cls_forward_t, dc_forward, dc_forward_t, ClsConfig, ClsParams, DepthConfig, DepthParams};
use pvm_core::params::{bind, cast, constants, rebind, slots, ConvParams, LinearParams};
use pvm_core::partial::{
    avg_pool2d, fill_until_valid, linear, partial_avg_pool2d, partial_avg_pool2d_t, partial_global_pool, partial_global_pool_t, partial_linear,
    partial_patch_embed, partial_patch_tokens_t, patch_tokens_t, pconv2d, pconv2d_t, std_conv2d_masked, MaskedVar, TokenVar,
};
use pvm_core::pvm::{pvm_forward, pvm_forward_t, pvm_residual, pvm_residual_t, vm_forward, PvmOptions, PvmParams, SubstituteOrder, TokenPadding};
use pvm_core::tensor::{MaskedTensor, Scalar, Tensor, TokenSequence, ValidityMask};
use rand::Rng;

pub const SUITES: [&str; 5] = ["mask-oracle", "agnosticism", "all-valid", "gradcheck", "fill"];

/// Outcome of one suite; `lines` is the human-readable report.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub lines: Vec<String>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn print(&self) {
        for l in &self.lines {
            println!("  {l}");
        }
        println!("{} {} ({:.1}s)", if self.passed { "PASS" } else { "FAIL" }, self.name, self.seconds);
    }
}

/// Runs suite `name`; `None` if no such suite exists.
pub fn run_suite(name: &str, seed: u64) -> Option<Result<SuiteReport>> {
    let (name, f): (&'static str, fn(u64) -> Result<(bool, Vec<String>)>) = match name {
        "mask-oracle" => ("mask-oracle", mask_oracle),
        "agnosticism" => ("agnosticism", agnosticism),
        "all-valid" => ("all-valid", all_valid),
        "gradcheck" => ("gradcheck", gradcheck),
        "fill" => ("fill", fill),
        _ => return None,
    };
    let start = Instant::now();
    Some(f(seed).map(|(passed, lines)| SuiteReport {
        name,
        passed,
        lines,
        seconds: start.elapsed().as_secs_f64(),
    }))
}

pub const MASK_ORACLE_CASES: usize = 1000;
pub const AGNOSTICISM_CASES: usize = 100;
pub const BASELINE_FAILURE_RATE: f64 = 0.95;
pub const ALL_VALID_CASES: usize = 50;
pub const ALL_VALID_TOL: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const FILL_CASES: usize = 200;

fn rng_for(seed: u64, suite: u64) -> ChaCha8Rng {
    stream_rng(seed, Stream::Sampling, 0xC0DE_0000 + suite)
}

fn rand_mask(rng: &mut impl Rng, dims: Vec<usize>, need_invalid: bool) -> ValidityMask {
    let n: usize = dims.iter().product();
    let density = rng.gen_range(0.1..0.9);
    let mut bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
    bits[rng.gen_range(0..n)] = true;
    if need_invalid && n > 1 && bits.iter().all(|&b| b) {
        let i = (0..n).find(|&i| i != bits.iter().position(|&b| b).unwrap_or(0)).unwrap_or(0);
        bits[i] = false;
    }
    ValidityMask::new(dims, bits).expect("dims match")
}

fn rand_tensor<T: Scalar>(rng: &mut impl Rng, dims: Vec<usize>) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

fn rand_masked(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> MaskedTensor<f32> {
    let m = rand_mask(rng, vec![h, w], true);
    let x = MaskedTensor::new_raw(rand_tensor(rng, vec![c, h, w]), m).expect("shapes match");
    x.with_placeholders(|| rng.gen_range(-100.0..100.0))
}

fn rand_footprint(rng: &mut impl Rng, h: usize, w: usize) -> KernelFootprint {
    loop {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let fp = KernelFootprint::square(k, rng.gen_range(1..=2), rng.gen_range(0..=2));
        if fp.output_hw(h, w).is_ok() {
            return fp;
        }
    }
}

fn rand_conv(rng: &mut impl Rng, out: usize, input: usize, fp: KernelFootprint) -> ConvParams {
    let mut p = ConvParams::init(rng, out, input, fp);
    p.bias = rand_tensor(rng, vec![out]);
    p
}

fn rand_pvm_options(rng: &mut impl Rng, patch: usize) -> PvmOptions {
    PvmOptions {
        patch,
        padding: TokenPadding::ALL[rng.gen_range(0..3)],
        direction: [ScanDirection::Forward, ScanDirection::Backward, ScanDirection::Bidirectional][rng.gen_range(0..3)],
        order: if rng.gen_bool(0.5) { SubstituteOrder::BeforeNorm } else { SubstituteOrder::AfterNorm },
    }
}

fn masked_eq(a: &MaskedTensor<f32>, b: &MaskedTensor<f32>) -> bool {
    a.values().bit_eq(b.values()) && a.mask() == b.mask()
}

fn mask_oracle(seed: u64) -> Result<(bool, Vec<String>)> {
    let mut rng = rng_for(seed, 1);
    let mut exact = 0;
    for _ in 0..MASK_ORACLE_CASES {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let fp = rand_footprint(&mut rng, h, w);
        let rule = if rng.gen_bool(0.5) { ValidityRule::AllValid } else { ValidityRule::AnyValid };
        let density = rng.gen_range(0.0..1.0);
        let m = ValidityMask::new(vec![h, w], (0..h * w).map(|_| rng.gen_bool(density)).collect())?;
        if propagate_receptive_field(&m, &fp, rule)? == oracle_receptive_field(&m, &fp, rule)? {
            exact += 1;
        }
    }
    Ok((exact == MASK_ORACLE_CASES, vec![format!("{exact}/{MASK_ORACLE_CASES} exact")]))
}

/// Whether some window of `fp` over `m` mixes valid and invalid pixels.
fn has_mixed_window(m: &ValidityMask, fp: &KernelFootprint) -> bool {
    let (h, w) = m.hw().expect("2-d mask");
    let Ok((oh, ow)) = fp.output_hw(h, w) else { return false };
    (0..oh * ow).any(|o| {
        let (oy, ox) = ((o / ow) * fp.stride, (o % ow) * fp.stride);
        let (mut valid, mut invalid) = (false, false);
        for dy in 0..fp.kernel_h {
            for dx in 0..fp.kernel_w {
                let (y, x) = ((oy + dy) as isize - fp.padding as isize, (ox + dx) as isize - fp.padding as isize);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    if m.get(y as usize * w + x as usize) {
                        valid = true;
                    } else {
                        invalid = true;
                    }
                }
            }
        }
        valid && invalid
    })
}

struct Tally {
    name: &'static str,
    ok: usize,
    total: usize,
}

fn agnosticism(seed: u64) -> Result<(bool, Vec<String>)> {
    let mut rng = rng_for(seed, 2);
    let mut lines = Vec::new();
    let mut passed = true;
    let n = AGNOSTICISM_CASES;
    let mut tallies: Vec<Tally> = Vec::new();
    let mut check = |name: &'static str, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<bool>, rng: &mut ChaCha8Rng| -> Result<()> {
        let mut ok = 0;
        for _ in 0..n {
            if f(rng)? {
                ok += 1;
            }
        }
        tallies.push(Tally { name, ok, total: n });
        Ok(())
    };

    check(
        "pconv2d",
        &mut |rng| {
            let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(3..=12), rng.gen_range(3..=12));
            let fp = rand_footprint(rng, h, w);
            let out = rng.gen_range(1..=3);
            let p = rand_conv(rng, out, c, fp);
            let x = rand_masked(rng, c, h, w);
            let y = x.with_placeholders(|| rng.gen_range(-1e3..1e3));
            Ok(masked_eq(&pconv2d(&x, &p)?, &pconv2d(&y, &p)?))
        },
        &mut rng,
    )?;
    check(
        "partial_linear",
        &mut |rng| {
            let (c, p) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
            let out = rng.gen_range(1..=6);
            let lin = LinearParams::init(rng, out, c * p * p);
            let x = rand_masked(rng, c, p, p);
            let y = x.with_placeholders(|| rng.gen_range(-1e3..1e3));
            let (a, va) = partial_linear(&x, &lin)?;
            let (b, vb) = partial_linear(&y, &lin)?;
            Ok(a.bit_eq(&b) && va == vb)
        },
        &mut rng,
    )?;
    check(
        "partial_avg_pool2d",
        &mut |rng| {
            let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(3..=12), rng.gen_range(3..=12));
            let fp = rand_footprint(rng, h, w);
            let x = rand_masked(rng, c, h, w);
            let y = x.with_placeholders(|| rng.gen_range(-1e3..1e3));
            Ok(masked_eq(&partial_avg_pool2d(&x, fp)?, &partial_avg_pool2d(&y, fp)?))
        },
        &mut rng,
    )?;
    check(
        "partial_global_pool",
        &mut |rng| {
            let (l, d) = (rng.gen_range(1..=16), rng.gen_range(1..=8));
            let m = rand_mask(rng, vec![l], true);
            let mut tokens: Tensor<f32> = rand_tensor(rng, vec![l, d]);
            let mut other = tokens.clone();
            for i in (0..l).filter(|&i| !m.get(i)) {
                for j in 0..d {
                    tokens.data_mut()[i * d + j] = rng.gen_range(-1e3..1e3);
                    other.data_mut()[i * d + j] = rng.gen_range(-1e3..1e3);
                }
            }
            let (a, va) = partial_global_pool(&TokenSequence::new(tokens, m.clone())?)?;
            let (b, vb) = partial_global_pool(&TokenSequence::new(other, m)?)?;
            Ok(a.bit_eq(&b) && va == vb)
        },
        &mut rng,
    )?;
    check(
        "partial_patch_embed",
        &mut |rng| {
            let (c, p) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
            let (h, w) = (p * rng.gen_range(1..=4), p * rng.gen_range(1..=4));
            let out = rng.gen_range(1..=6);
            let lin = LinearParams::init(rng, out, c * p * p);
            let x = rand_masked(rng, c, h, w);
            let y = x.with_placeholders(|| rng.gen_range(-1e3..1e3));
            let (a, b) = (partial_patch_embed(&x, &lin, p)?, partial_patch_embed(&y, &lin, p)?);
            Ok(a.tokens.bit_eq(&b.tokens) && a.token_mask == b.token_mask)
        },
        &mut rng,
    )?;
    for (name, residual) in [("pvm_forward", false), ("pvm_residual", true)] {
        check(
            name,
            &mut |rng| {
                let (c, p) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
                let (h, w) = (p * rng.gen_range(1..=4), p * rng.gen_range(1..=4));
                let (d, e, st) = (rng.gen_range(2..=6), rng.gen_range(1..=2), rng.gen_range(1..=3));
                let params = PvmParams::init(rng, c, p, d, e, st);
                let opts = rand_pvm_options(rng, p);
                let x = rand_masked(rng, c, h, w);
                let y = x.with_placeholders(|| rng.gen_range(-1e3..1e3));
                let f = if residual { pvm_residual::<f32> } else { pvm_forward::<f32> };
                Ok(masked_eq(&f(&x, &params, &opts)?, &f(&y, &params, &opts)?))
            },
            &mut rng,
        )?;
    }
    check(
        "cls_forward(pvm)",
        &mut |rng| {
            let cfg = rand_cls_config(rng);
            let p = ClsParams::init(rng, &cfg)?;
            let x = rand_masked(rng, cfg.channels, cfg.image_size, cfg.image_size);
            let y = x.with_placeholders(|| rng.gen_range(-1e3..1e3));
            Ok(cls_forward(&x, &cfg, &p)?.bit_eq(&cls_forward(&y, &cfg, &p)?))
        },
        &mut rng,
    )?;
    check(
        "dc_forward(pvm)",
        &mut |rng| {
            let cfg = rand_depth_config(rng);
            let p = DepthParams::init(rng, &cfg)?;
            let x = rand_masked(rng, 1, cfg.image_size, cfg.image_size).with_placeholders(|| rng.gen_range(-80.0..80.0));
            let y = x.with_placeholders(|| rng.gen_range(-1e3..1e3));
            let ((a, ia), (b, ib)) = (dc_forward(&x, &cfg, &p)?, dc_forward(&y, &cfg, &p)?);
            Ok(masked_eq(&a, &b) && ia == ib)
        },
        &mut rng,
    )?;
    for t in &tallies {
        passed &= t.ok == t.total;
        lines.push(format!("{}: {}/{} outputs unchanged", t.name, t.ok, t.total));
    }

    // Baselines must be sensitive: count changed outputs over cases with a
    // partially invalid window or patch.
    let (mut qualifying, mut changed) = (0, 0);
    while qualifying < n {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(3..=12), rng.gen_range(3..=12));
        let fp = rand_footprint(&mut rng, h, w);
        let out = rng.gen_range(1..=3);
        let p = rand_conv(&mut rng, out, c, fp);
        let x = rand_masked(&mut rng, c, h, w);
        if !has_mixed_window(x.mask(), &fp) {
            continue;
        }
        qualifying += 1;
        let y = x.with_placeholders(|| rng.gen_range(-1e3..1e3));
        if !masked_eq(&std_conv2d_masked(&x, &p)?, &std_conv2d_masked(&y, &p)?) {
            changed += 1;
        }
    }
    let rate = changed as f64 / qualifying as f64;
    passed &= rate >= BASELINE_FAILURE_RATE;
    lines.push(format!("std_conv2d_masked: FAILS agnosticism on {changed}/{qualifying} qualifying cases (expected ≥ {:.0}%)", BASELINE_FAILURE_RATE * 100.0));

    let (mut qualifying, mut changed) = (0, 0);
    while qualifying < n {
        let (c, p) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let (h, w) = (p * rng.gen_range(1..=4), p * rng.gen_range(1..=4));
        let (d, e, st) = (rng.gen_range(2..=6), rng.gen_range(1..=2), rng.gen_range(1..=3));
        let params = PvmParams::init(&mut rng, c, p, d, e, st);
        let opts = rand_pvm_options(&mut rng, p);
        let x = rand_masked(&mut rng, c, h, w);
        if !has_mixed_window(x.mask(), &KernelFootprint::square(p, p, 0)) {
            continue;
        }
        qualifying += 1;
        let y = x.with_placeholders(|| rng.gen_range(-1e3..1e3));
        if !masked_eq(&vm_forward(&x, &params, &opts)?, &vm_forward(&y, &params, &opts)?) {
            changed += 1;
        }
    }
    let rate = changed as f64 / qualifying as f64;
    passed &= rate >= BASELINE_FAILURE_RATE;
    lines.push(format!("vm_forward: FAILS agnosticism on {changed}/{qualifying} qualifying cases (expected ≥ {:.0}%)", BASELINE_FAILURE_RATE * 100.0));
    Ok((passed, lines))
}

fn rand_cls_config(rng: &mut (impl Rng + ?Sized)) -> ClsConfig {
    let patch = [2, 4][rng.gen_range(0..2)];
    ClsConfig {
        image_size: patch * rng.gen_range(1..=3),
        channels: rng.gen_range(1..=2),
        patch,
        dim: rng.gen_range(2..=6),
        expand: rng.gen_range(1..=2),
        states: rng.gen_range(1..=3),
        blocks: rng.gen_range(1..=2),
        classes: rng.gen_range(2..=5),
        token_padding: TokenPadding::ALL[rng.gen_range(0..3)],
        ..ClsConfig::default()
    }
}

fn rand_depth_config(rng: &mut (impl Rng + ?Sized)) -> DepthConfig {
    DepthConfig {
        image_size: 2 * rng.gen_range(2..=6),
        features: rng.gen_range(1..=3),
        patch: 2,
        dim: rng.gen_range(2..=4),
        expand: 1,
        states: 2,
        rpssb_blocks: 1,
        pvmm_per_block: rng.gen_range(1..=2),
        token_padding: TokenPadding::ALL[rng.gen_range(0..3)],
        ..DepthConfig::default()
    }
}

fn all_valid(seed: u64) -> Result<(bool, Vec<String>)> {
    let mut rng = rng_for(seed, 3);
    let mut worst = [0.0f64; 5];
    let mut pvm_exact = 0;
    for _ in 0..ALL_VALID_CASES {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(3..=12), rng.gen_range(3..=12));
        let x: Tensor<f32> = rand_tensor(&mut rng, vec![c, h, w]);
        let xm = MaskedTensor::fully_valid(x.clone())?;
        let mut fp = rand_footprint(&mut rng, h, w);
        fp.padding = 0;
        while fp.output_hw(h, w).is_err() {
            fp = KernelFootprint::square(1, fp.stride, 0);
        }
        let out = rng.gen_range(1..=3);
        let conv = rand_conv(&mut rng, out, c, fp);
        let a = pconv2d(&xm, &conv)?;
        let b = std_conv2d_masked(&xm, &conv)?;
        worst[0] = worst[0].max(a.values().max_abs_diff(b.values())? as f64);

        let a = partial_avg_pool2d(&xm, fp)?;
        worst[1] = worst[1].max(a.values().max_abs_diff(&avg_pool2d(&x, fp)?)? as f64);

        let p = rng.gen_range(1..=3);
        let patch = MaskedTensor::fully_valid(rand_tensor(&mut rng, vec![c, p, p]))?;
        let out = rng.gen_range(1..=5);
        let lin = LinearParams::init(&mut rng, out, c * p * p);
        let (a, _) = partial_linear(&patch, &lin)?;
        worst[2] = worst[2].max(a.max_abs_diff(&linear(patch.values(), &lin)?)? as f64);

        let (hp, wp) = (p * rng.gen_range(1..=3), p * rng.gen_range(1..=3));
        let img = MaskedTensor::fully_valid(rand_tensor(&mut rng, vec![c, hp, wp]))?;
        let a = partial_patch_embed(&img, &lin, p)?;
        let mut tape = Tape::new();
        let xv = MaskedVar::constant(&mut tape, &img);
        let lv = constants(&mut tape, &lin);
        let t = patch_tokens_t(&mut tape, &xv, &lv, p)?;
        worst[3] = worst[3].max(a.tokens.max_abs_diff(tape.value(t.tokens))? as f64);
        let (g, _) = partial_global_pool(&a)?;
        let d = a.tokens.dims()[1];
        let l = a.tokens.dims()[0];
        let mean = Tensor::from_fn(vec![d], |j| (0..l).map(|i| a.tokens.data()[i * d + j]).sum::<f32>() / l as f32);
        worst[4] = worst[4].max(g.max_abs_diff(&mean)? as f64);

        let (d, e, st) = (rng.gen_range(2..=6), rng.gen_range(1..=2), rng.gen_range(1..=3));
        let params = PvmParams::init(&mut rng, c, p, d, e, st);
        let opts = rand_pvm_options(&mut rng, p);
        if pvm_forward(&img, &params, &opts)?.values().bit_eq(vm_forward(&img, &params, &opts)?.values()) {
            pvm_exact += 1;
        }
    }
    let names = ["pconv2d vs conv2d", "partial_avg_pool2d vs avg_pool2d", "partial_linear vs linear", "partial_patch_embed vs patch_embed", "partial_global_pool vs mean"];
    let mut lines: Vec<String> = names.iter().zip(worst).map(|(n, d)| format!("{n}: max |Δ| = {d:.3e}")).collect();
    lines.push(format!("pvm_forward ≡ vm_forward: {pvm_exact}/{ALL_VALID_CASES} bit-identical"));
    let passed = worst.iter().all(|&d| d <= ALL_VALID_TOL) && pvm_exact == ALL_VALID_CASES;
    Ok((passed, lines))
}

/// Gradient of a random weighted sum of `f`'s output w.r.t. the input,
/// checked for exact zeros at invalid positions.
fn invalid_grads_are_zero(x: &MaskedTensor<f64>, f: impl Fn(&mut Tape<f64>, &MaskedVar) -> Result<pvm_core::autodiff::Var>, rng: &mut impl Rng) -> Result<bool> {
    let mut tape = Tape::new();
    let xv = MaskedVar::leaf(&mut tape, x);
    let y = f(&mut tape, &xv)?;
    let w = rand_tensor(rng, tape.dims(y).to_vec());
    let loss = weighted_sum_loss(&mut tape, y, &w)?;
    let g = tape.backward(loss)?;
    let Some(gx) = g.get(xv.value) else { return Ok(true) };
    let plane = x.mask().len();
    Ok(gx.data().iter().enumerate().all(|(i, &v)| x.mask().get(i % plane) || v == 0.0))
}

fn gradcheck(seed: u64) -> Result<(bool, Vec<String>)> {
    let mut lines = Vec::new();
    let mut passed = true;
    let checks = check_primitives(seed, 20)?;
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = checks.iter().filter(|c| !(c.max_rel_err <= PRIMITIVE_TOL)).map(|c| c.name).collect();
    passed &= failing.is_empty();
    lines.push(format!("{} primitives, worst relative error {worst:.2e} (tolerance {PRIMITIVE_TOL:.0e})", checks.len()));
    if !failing.is_empty() {
        lines.push(format!("failing primitives: {}", failing.join(", ")));
    }

    let mut rng = rng_for(seed, 4);
    let mut e2e: f64 = 0.0;
    for _ in 0..3 {
        let cfg = ClsConfig {
            image_size: 8,
            patch: 4,
            dim: 4,
            expand: 1,
            states: 2,
            blocks: 1,
            classes: 3,
            ..ClsConfig::default()
        };
        let p: ClsParams<Tensor<f64>> = cast(&ClsParams::init(&mut rng, &cfg)?);
        let x = rand_masked(&mut rng, 1, 8, 8);
        let mask = x.mask().clone();
        let mut inputs = vec![x.values().cast::<f64>()];
        inputs.extend(slots(&p));
        let label = rng.gen_range(0..3);
        let r = grad_check(&inputs, GRAD_CHECK_STEP, |t, v| {
            let pv = rebind(&p, &v[1..]);
            let xv = MaskedVar { value: v[0], mask: mask.clone() };
            let z = cls_forward_t(t, &xv, &pv, &cfg)?;
            t.cross_entropy(z, label)
        })?;
        e2e = e2e.max(r.max_rel_err);
    }
    passed &= e2e <= END_TO_END_TOL;
    lines.push(format!("end-to-end tiny classifier: worst relative error {e2e:.2e} (tolerance {END_TO_END_TOL:.0e})"));

    let mut zero = Vec::new();
    let n = 10;
    let mut tally = |name: &str, ok: usize| zero.push((name.to_string(), ok));
    let mut ok = 0;
    for _ in 0..n {
        let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(3..=8), rng.gen_range(3..=8));
        let fp = rand_footprint(&mut rng, h, w);
        let p: ConvParams<Tensor<f64>> = cast(&rand_conv(&mut rng, 2, c, fp));
        let x = masked_f64(&mut rng, c, h, w);
        ok += invalid_grads_are_zero(
            &x,
            |t, xv| {
                let pv = bind(t, &p);
                Ok(pconv2d_t(t, xv, &pv)?.value)
            },
            &mut rng,
        )? as usize;
    }
    tally("pconv2d", ok);
    let mut ok = 0;
    for _ in 0..n {
        let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(3..=8), rng.gen_range(3..=8));
        let fp = rand_footprint(&mut rng, h, w);
        let x = masked_f64(&mut rng, c, h, w);
        ok += invalid_grads_are_zero(&x, |t, xv| Ok(partial_avg_pool2d_t(t, xv, fp)?.value), &mut rng)? as usize;
    }
    tally("partial_avg_pool2d", ok);
    let mut ok = 0;
    for _ in 0..n {
        let (c, p) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let lin: LinearParams<Tensor<f64>> = cast(&LinearParams::init(&mut rng, 3, c * p * p));
        let x = masked_f64(&mut rng, c, 2 * p, 2 * p);
        ok += invalid_grads_are_zero(
            &x,
            |t, xv| {
                let lv = bind(t, &lin);
                let tv = partial_patch_tokens_t(t, xv, &lv, p)?;
                Ok(partial_global_pool_t(t, &TokenVar { tokens: tv.tokens, token_mask: tv.token_mask })?.0)
            },
            &mut rng,
        )? as usize;
    }
    tally("partial_patch_embed + partial_global_pool", ok);
    for residual in [false, true] {
        let mut ok = 0;
        for _ in 0..n {
            let (c, p) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            let params: PvmParams<Tensor<f64>> = cast(&PvmParams::init(&mut rng, c, p, 3, 1, 2));
            let opts = rand_pvm_options(&mut rng, p);
            let x = masked_f64(&mut rng, c, 2 * p, 3 * p);
            ok += invalid_grads_are_zero(
                &x,
                |t, xv| {
                    let pv = bind(t, &params);
                    let y = if residual { pvm_residual_t(t, xv, &pv, &opts)? } else { pvm_forward_t(t, xv, &pv, &opts)? };
                    Ok(y.value)
                },
                &mut rng,
            )? as usize;
        }
        tally(if residual { "pvm_residual" } else { "pvm_forward" }, ok);
    }
    let mut ok = 0;
    for _ in 0..n {
        let cfg = rand_cls_config(&mut rng);
        let p: ClsParams<Tensor<f64>> = cast(&ClsParams::init(&mut rng, &cfg)?);
        let x = masked_f64(&mut rng, cfg.channels, cfg.image_size, cfg.image_size);
        ok += invalid_grads_are_zero(
            &x,
            |t, xv| {
                let pv = bind(t, &p);
                Ok(cls_forward_t(t, xv, &pv, &cfg)?)
            },
            &mut rng,
        )? as usize;
    }
    tally("cls_forward(pvm)", ok);
    let mut ok = 0;
    for _ in 0..n {
        let cfg = rand_depth_config(&mut rng);
        let p: DepthParams<Tensor<f64>> = cast(&DepthParams::init(&mut rng, &cfg)?);
        let x = masked_f64(&mut rng, 1, cfg.image_size, cfg.image_size);
        ok += invalid_grads_are_zero(
            &x,
            |t, xv| {
                let pv = bind(t, &p);
                Ok(dc_forward_t(t, xv, &pv, &cfg)?.pred)
            },
            &mut rng,
        )? as usize;
    }
    tally("dc_forward(pvm)", ok);
    for (name, ok) in zero {
        passed &= ok == n;
        lines.push(format!("{name}: zero gradient at invalid inputs in {ok}/{n} cases"));
    }
    Ok((passed, lines))
}

fn masked_f64(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> MaskedTensor<f64> {
    let x = rand_masked(rng, c, h, w);
    MaskedTensor::new_raw(x.values().cast(), x.mask().clone()).expect("shapes match")
}

/// Largest Chebyshev distance from an invalid pixel to the nearest valid one.
pub fn chebyshev_radius(m: &ValidityMask) -> usize {
    let (h, w) = m.hw().expect("2-d mask");
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    for (i, d) in dist.iter_mut().enumerate() {
        if m.get(i) {
            *d = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    let j = ny as usize * w + nx as usize;
                    if dist[j] == usize::MAX {
                        dist[j] = dist[i] + 1;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    dist.into_iter().max().unwrap_or(0)
}

fn fill(seed: u64) -> Result<(bool, Vec<String>)> {
    let mut rng = rng_for(seed, 5);
    let (mut within, mut dense, mut max_iters) = (0, 0, 0);
    for _ in 0..FILL_CASES {
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let density = 10f64.powf(rng.gen_range(-3.0..-0.3));
        let mut bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        bits[rng.gen_range(0..h * w)] = true;
        let m = ValidityMask::new(vec![h, w], bits)?;
        let c = rng.gen_range(1..=2);
        let p = rand_conv(&mut rng, c, c, KernelFootprint::same(3));
        let x = MaskedTensor::new(rand_tensor(&mut rng, vec![c, h, w]), m.clone())?;
        let bound = chebyshev_radius(&m);
        let (y, iters) = fill_until_valid(&x, &p, bound.max(1) * 4)?;
        within += (iters <= bound) as usize;
        dense += y.mask().all_valid() as usize;
        max_iters = max_iters.max(iters);
    }
    let mut center = vec![false; 25];
    center[12] = true;
    let x = MaskedTensor::new(Tensor::<f32>::full(vec![1, 5, 5], 1.0), ValidityMask::new(vec![5, 5], center)?)?;
    let p = rand_conv(&mut rng, 1, 1, KernelFootprint::same(3));
    let (_, center_iters) = fill_until_valid(&x, &p, 10)?;
    let lines = vec![
        format!("{within}/{FILL_CASES} within the Chebyshev radius bound (most passes: {max_iters})"),
        format!("{dense}/{FILL_CASES} all-ones output masks"),
        format!("5×5 single centre pixel: {center_iters} passes (expected 2)"),
    ];
    Ok((within == FILL_CASES && dense == FILL_CASES && center_iters == 2, lines))
}
