//! Randomized finite-difference checks for every tape primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, weighted_sum_loss, Tape, Var};
use crate::error::Result;
use crate::mask::{KernelFootprint, ScanDirection};
use crate::tensor::{Tensor, ValidityMask};

/// Central-difference step used by every suite in the crate.
pub const GRAD_CHECK_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(lo..hi))
}

fn rand_mask(rng: &mut ChaCha8Rng, dims: &[usize], p_valid: f64) -> ValidityMask {
    let n: usize = dims.iter().product();
    let mut bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(p_valid)).collect();
    bits[0] = true;
    ValidityMask::new(dims.to_vec(), bits).expect("mask dims")
}

/// Wraps `op` so the loss is a fixed random weighting of its output.
fn weighted(rng: &mut ChaCha8Rng, out_dims: &[usize], op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Build {
    let w = rand_tensor(rng, out_dims, -1.0, 1.0);
    Box::new(move |tape, v| {
        let y = op(tape, v)?;
        weighted_sum_loss(tape, y, &w)
    })
}

fn case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let d = |rng: &mut ChaCha8Rng| rng.gen_range(2..5usize);
    match name {
        "add" | "sub" | "mul" => {
            let dims = [d(rng), d(rng)];
            let inputs = vec![rand_tensor(rng, &dims, -2.0, 2.0), rand_tensor(rng, &dims, -2.0, 2.0)];
            let op = name.to_string();
            let build = weighted(rng, &dims, move |t, v| match op.as_str() {
                "add" => t.add(v[0], v[1]),
                "sub" => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            });
            Case { inputs, build }
        }
        "scale" | "neg" | "exp" | "softplus" | "sigmoid" | "silu" => {
            let dims = [d(rng), d(rng)];
            let inputs = vec![rand_tensor(rng, &dims, -3.0, 3.0)];
            let s = rng.gen_range(-2.0..2.0);
            let op = name.to_string();
            let build = weighted(rng, &dims, move |t, v| {
                Ok(match op.as_str() {
                    "scale" => t.scale(v[0], s),
                    "neg" => t.neg(v[0]),
                    "exp" => t.exp(v[0]),
                    "softplus" => t.softplus(v[0]),
                    "sigmoid" => t.sigmoid(v[0]),
                    _ => t.silu(v[0]),
                })
            });
            Case { inputs, build }
        }
        "sum_all" | "mean_all" => {
            let dims = [d(rng), d(rng)];
            let inputs = vec![rand_tensor(rng, &dims, -2.0, 2.0)];
            let k = rng.gen_range(0.5..2.0);
            let mean = name == "mean_all";
            // Squaring keeps the loss nonlinear in the reduction output.
            let build: Build = Box::new(move |t, v| {
                let s = if mean { t.mean_all(v[0]) } else { t.sum_all(v[0]) };
                let s2 = t.mul(s, s)?;
                Ok(t.scale(s2, k))
            });
            Case { inputs, build }
        }
        "matmul" => {
            let (m, k, n) = (d(rng), d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[m, k], -1.0, 1.0), rand_tensor(rng, &[k, n], -1.0, 1.0)];
            let build = weighted(rng, &[m, n], |t, v| t.matmul(v[0], v[1]));
            Case { inputs, build }
        }
        "linear" => {
            let (m, i, o) = (d(rng), d(rng), d(rng));
            let inputs = vec![
                rand_tensor(rng, &[m, i], -1.0, 1.0),
                rand_tensor(rng, &[o, i], -1.0, 1.0),
                rand_tensor(rng, &[o], -1.0, 1.0),
            ];
            let build = weighted(rng, &[m, o], |t, v| t.linear(v[0], v[1], v[2]));
            Case { inputs, build }
        }
        "transpose" => {
            let (m, n) = (d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[m, n], -1.0, 1.0)];
            let build = weighted(rng, &[n, m], |t, v| t.transpose(v[0]));
            Case { inputs, build }
        }
        "reshape" => {
            let (m, n) = (d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[m, n], -1.0, 1.0)];
            let build = weighted(rng, &[n, m], move |t, v| t.reshape(v[0], &[n, m]));
            Case { inputs, build }
        }
        "narrow_cols" => {
            let (m, n) = (d(rng), d(rng) + 2);
            let start = rng.gen_range(0..n - 1);
            let len = rng.gen_range(1..=n - start);
            let inputs = vec![rand_tensor(rng, &[m, n], -1.0, 1.0)];
            let build = weighted(rng, &[m, len], move |t, v| t.narrow_cols(v[0], start, len));
            Case { inputs, build }
        }
        "concat0" => {
            let (a, b, n) = (d(rng), d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[a, n], -1.0, 1.0), rand_tensor(rng, &[b, n], -1.0, 1.0)];
            let build = weighted(rng, &[a + b, n], |t, v| t.concat0(v));
            Case { inputs, build }
        }
        "conv2d" => {
            let (c, k) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let kk = [1, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..3);
            let padding = rng.gen_range(0..2);
            let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
            let (oh, ow) = KernelFootprint::square(kk, stride, padding).output_hw(h, w).expect("fits");
            let inputs = vec![rand_tensor(rng, &[c, h, w], -1.0, 1.0), rand_tensor(rng, &[k, c, kk, kk], -1.0, 1.0)];
            let build = weighted(rng, &[k, oh, ow], move |t, v| t.conv2d(v[0], v[1], stride, padding));
            Case { inputs, build }
        }
        "add_channel_bias" => {
            let (c, h, w) = (d(rng), d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[c, h, w], -1.0, 1.0), rand_tensor(rng, &[c], -1.0, 1.0)];
            let build = weighted(rng, &[c, h, w], |t, v| t.add_channel_bias(v[0], v[1]));
            Case { inputs, build }
        }
        "mask_positions" | "scale_positions" => {
            let (c, h, w) = (d(rng), d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[c, h, w], -1.0, 1.0)];
            let mask = rand_mask(rng, &[h, w], 0.6);
            let factors: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.5..3.0)).collect();
            let scale = name == "scale_positions";
            let build = weighted(rng, &[c, h, w], move |t, v| {
                if scale {
                    t.scale_positions(v[0], factors.clone())
                } else {
                    t.mask_positions(v[0], &mask)
                }
            });
            Case { inputs, build }
        }
        "mask_rows" => {
            let (l, n) = (d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[l, n], -1.0, 1.0)];
            let mask = rand_mask(rng, &[l], 0.6);
            let build = weighted(rng, &[l, n], move |t, v| t.mask_rows(v[0], &mask));
            Case { inputs, build }
        }
        "window_sum" | "max_pool2d" => {
            let c = d(rng);
            let (h, w) = (rng.gen_range(4..7), rng.gen_range(4..7));
            let kk = [2, 3][rng.gen_range(0..2)];
            let fp = KernelFootprint::square(kk, rng.gen_range(1..3), rng.gen_range(0..2));
            let (oh, ow) = fp.output_hw(h, w).expect("fits");
            let inputs = vec![rand_tensor(rng, &[c, h, w], -1.0, 1.0)];
            let max = name == "max_pool2d";
            let build = weighted(rng, &[c, oh, ow], move |t, v| {
                if max {
                    t.max_pool2d(v[0], fp)
                } else {
                    t.window_sum(v[0], fp)
                }
            });
            Case { inputs, build }
        }
        "masked_mean_rows" => {
            let (l, n) = (d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[l, n], -1.0, 1.0)];
            let mask = rand_mask(rng, &[l], 0.6);
            let build = weighted(rng, &[n], move |t, v| t.masked_mean_rows(v[0], &mask));
            Case { inputs, build }
        }
        "substitute_rows" => {
            let (l, n) = (d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[l, n], -1.0, 1.0), rand_tensor(rng, &[n], -1.0, 1.0)];
            let mask = rand_mask(rng, &[l], 0.5);
            let build = weighted(rng, &[l, n], move |t, v| t.substitute_rows(v[0], v[1], &mask));
            Case { inputs, build }
        }
        "patchify" | "unpatchify" => {
            let c = rng.gen_range(1..3);
            let p = rng.gen_range(1..3);
            let (gh, gw) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (h, w) = (gh * p, gw * p);
            if name == "patchify" {
                let inputs = vec![rand_tensor(rng, &[c, h, w], -1.0, 1.0)];
                let build = weighted(rng, &[gh * gw, c * p * p], move |t, v| t.patchify(v[0], p));
                Case { inputs, build }
            } else {
                let inputs = vec![rand_tensor(rng, &[gh * gw, c * p * p], -1.0, 1.0)];
                let build = weighted(rng, &[c, h, w], move |t, v| t.unpatchify(v[0], c, h, w, p));
                Case { inputs, build }
            }
        }
        "mean_pad_patches" => {
            let c = rng.gen_range(1..3);
            let p = 2;
            let l = d(rng);
            let inputs = vec![rand_tensor(rng, &[l, c * p * p], -1.0, 1.0)];
            let bits: Vec<bool> = (0..l * p * p).map(|_| rng.gen_bool(0.5)).collect();
            let build = weighted(rng, &[l, c * p * p], move |t, v| t.mean_pad_patches(v[0], &bits, c));
            Case { inputs, build }
        }
        "layer_norm" => {
            let (l, n) = (d(rng), d(rng) + 1);
            let inputs = vec![
                rand_tensor(rng, &[l, n], -2.0, 2.0),
                rand_tensor(rng, &[n], 0.5, 1.5),
                rand_tensor(rng, &[n], -0.5, 0.5),
            ];
            let build = weighted(rng, &[l, n], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
            Case { inputs, build }
        }
        "selective_scan" => {
            let (l, e, n) = (rng.gen_range(1..7), d(rng), d(rng));
            let direction = [ScanDirection::Forward, ScanDirection::Backward, ScanDirection::Bidirectional][rng.gen_range(0..3)];
            let inputs = vec![
                rand_tensor(rng, &[l, e], -1.0, 1.0),
                rand_tensor(rng, &[l, e], 0.1, 1.0),
                rand_tensor(rng, &[e, n], -2.0, -0.2),
                rand_tensor(rng, &[l, n], -1.0, 1.0),
                rand_tensor(rng, &[l, n], -1.0, 1.0),
                rand_tensor(rng, &[e], -1.0, 1.0),
            ];
            let build = weighted(rng, &[l, e], move |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], direction));
            Case { inputs, build }
        }
        "charbonnier" => {
            let (c, h, w) = (rng.gen_range(1..3), d(rng), d(rng));
            let inputs = vec![rand_tensor(rng, &[c, h, w], -1.0, 1.0)];
            let target = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
            let mask = rand_mask(rng, &[h, w], 0.6);
            let eps = rng.gen_range(1e-3..0.5);
            let build: Build = Box::new(move |t, v| t.charbonnier(v[0], &target, &mask, eps));
            Case { inputs, build }
        }
        "cross_entropy" => {
            let classes = rng.gen_range(2..8);
            let label = rng.gen_range(0..classes);
            let inputs = vec![rand_tensor(rng, &[classes], -3.0, 3.0)];
            let build: Build = Box::new(move |t, v| t.cross_entropy(v[0], label));
            Case { inputs, build }
        }
        other => unreachable!("no gradient case for {other}"),
    }
}

/// Every primitive exposed by [`Tape`].
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "softplus",
    "sigmoid",
    "silu",
    "sum_all",
    "mean_all",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "narrow_cols",
    "concat0",
    "conv2d",
    "add_channel_bias",
    "mask_positions",
    "mask_rows",
    "scale_positions",
    "window_sum",
    "max_pool2d",
    "masked_mean_rows",
    "substitute_rows",
    "patchify",
    "unpatchify",
    "mean_pad_patches",
    "layer_norm",
    "selective_scan",
    "charbonnier",
    "cross_entropy",
];

/// Runs `instances` random gradient checks per primitive.
pub fn check_primitives(seed: u64, instances: usize) -> Result<Vec<PrimitiveCheck>> {
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for (idx, &name) in PRIMITIVES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let c = case(name, &mut rng);
            let report = grad_check(&c.inputs, GRAD_CHECK_STEP, &c.build)?;
            worst = worst.max(report.max_rel_err);
        }
        out.push(PrimitiveCheck {
            name,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(out)
}
