//! Mask-aware operators and their mask-unaware counterparts.
//!
//! Each operator comes in two forms: a tape form over [`MaskedVar`] used by
//! the models, and a plain form over [`MaskedTensor`] that runs the tape
//! form on constants.
//!
//! Partial operators read only valid inputs and zero every invalid output,
//! so their results are bit-identical under any change of placeholder
//! values. The standard operators read raw values (placeholders included)
//! and only keep honest mask bookkeeping.

use crate::autodiff::{PatchLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{propagate_receptive_field, window_valid_counts, KernelFootprint, ValidityRule};
use crate::params::{constants, ConvParams, LinearParams};
use crate::tensor::{MaskedTensor, Scalar, Tensor, TokenSequence, ValidityMask};

/// A tape value paired with its (constant) validity mask.
#[derive(Clone, Debug)]
pub struct MaskedVar {
    pub value: Var,
    pub mask: ValidityMask,
}

impl MaskedVar {
    pub fn constant<T: Scalar>(tape: &mut Tape<T>, x: &MaskedTensor<T>) -> Self {
        Self {
            value: tape.constant(x.values().clone()),
            mask: x.mask().clone(),
        }
    }

    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, x: &MaskedTensor<T>) -> Self {
        Self {
            value: tape.leaf(x.values().clone()),
            mask: x.mask().clone(),
        }
    }

    /// Reads the value back as a masked tensor, keeping stored values as-is.
    pub fn read<T: Scalar>(&self, tape: &Tape<T>) -> Result<MaskedTensor<T>> {
        MaskedTensor::new_raw(tape.value(self.value).clone(), self.mask.clone())
    }
}

fn check_conv_shape<T: Scalar>(tape: &Tape<T>, x: &MaskedVar, p: &ConvParams<Var>, op: &'static str) -> Result<()> {
    let xd = tape.dims(x.value);
    let wd = tape.dims(p.weight);
    if xd.len() != 3 || wd.len() != 4 || wd[1] != xd[0] || xd[1..] != *x.mask.dims() {
        return Err(Error::shape(op, xd, wd));
    }
    if wd[2] != p.footprint.kernel_h || wd[3] != p.footprint.kernel_w || tape.dims(p.bias) != [wd[0]] {
        return Err(Error::invalid(op, format!("weight {wd:?} disagrees with {:?}", p.footprint)));
    }
    Ok(())
}

/// Partial convolution: `W·(x ⊙ m)·(window_size / valid_count) + bias` where
/// the window holds a valid input, zero elsewhere.
pub fn pconv2d_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, p: &ConvParams<Var>) -> Result<MaskedVar> {
    check_conv_shape(tape, x, p, "pconv2d")?;
    let fp = p.footprint;
    let (oh, ow, counts) = window_valid_counts(&x.mask, &fp)?;
    let ws = T::from_f64_lossy(fp.window_size() as f64);
    let factors = counts
        .iter()
        .map(|&c| if c > 0 { ws / T::from_f64_lossy(c as f64) } else { T::zero() })
        .collect();
    let out_mask = ValidityMask::new(vec![oh, ow], counts.iter().map(|&c| c > 0).collect())?;
    let xm = tape.mask_positions(x.value, &x.mask)?;
    let y = tape.conv2d(xm, p.weight, fp.stride, fp.padding)?;
    let y = tape.scale_positions(y, factors)?;
    let y = tape.add_channel_bias(y, p.bias)?;
    let y = tape.mask_positions(y, &out_mask)?;
    Ok(MaskedVar { value: y, mask: out_mask })
}

/// Standard convolution on raw values with erosion bookkeeping.
pub fn std_conv2d_masked_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, p: &ConvParams<Var>) -> Result<MaskedVar> {
    check_conv_shape(tape, x, p, "std_conv2d_masked")?;
    let fp = p.footprint;
    let mask = propagate_receptive_field(&x.mask, &fp, ValidityRule::AllValid)?;
    let y = tape.conv2d(x.value, p.weight, fp.stride, fp.padding)?;
    let y = tape.add_channel_bias(y, p.bias)?;
    Ok(MaskedVar { value: y, mask })
}

/// Mean over the valid entries of each window.
pub fn partial_avg_pool2d_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, fp: KernelFootprint) -> Result<MaskedVar> {
    let xd = tape.dims(x.value);
    if xd.len() != 3 || xd[1..] != *x.mask.dims() {
        return Err(Error::shape("partial_avg_pool2d", xd, x.mask.dims()));
    }
    let (oh, ow, counts) = window_valid_counts(&x.mask, &fp)?;
    let factors = counts
        .iter()
        .map(|&c| if c > 0 { T::one() / T::from_f64_lossy(c as f64) } else { T::zero() })
        .collect();
    let out_mask = ValidityMask::new(vec![oh, ow], counts.iter().map(|&c| c > 0).collect())?;
    let xm = tape.mask_positions(x.value, &x.mask)?;
    let s = tape.window_sum(xm, fp)?;
    let y = tape.scale_positions(s, factors)?;
    let y = tape.mask_positions(y, &out_mask)?;
    Ok(MaskedVar { value: y, mask: out_mask })
}

/// Standard average pooling (padding taps read zero, divisor is the full
/// window).
pub fn avg_pool2d_t<T: Scalar>(tape: &mut Tape<T>, x: Var, fp: KernelFootprint) -> Result<Var> {
    let s = tape.window_sum(x, fp)?;
    Ok(tape.scale(s, T::one() / T::from_f64_lossy(fp.window_size() as f64)))
}

/// Tokens of a partial patch projection.
#[derive(Clone, Debug)]
pub struct TokenVar {
    /// `L × D`, invalid rows zero.
    pub tokens: Var,
    pub token_mask: ValidityMask,
}

/// Splits `x` into `p × p` patches, mean-pads invalid pixels per channel
/// inside each patch, projects with `lin` and zeroes the tokens of patches
/// without any valid pixel.
pub fn partial_patch_tokens_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, lin: &LinearParams<Var>, p: usize) -> Result<TokenVar> {
    let xd = tape.dims(x.value).to_vec();
    if xd.len() != 3 || xd[1..] != *x.mask.dims() {
        return Err(Error::shape("partial_patch_embed", &xd, x.mask.dims()));
    }
    let layout = PatchLayout::new(xd[0], xd[1], xd[2], p)?;
    let bits = layout.patch_bits(&x.mask)?;
    let token_mask = ValidityMask::new(
        vec![layout.tokens()],
        bits.chunks_exact(p * p).map(|c| c.iter().any(|&b| b)).collect(),
    )?;
    let rows = tape.patchify(x.value, p)?;
    let rows = tape.mean_pad_patches(rows, &bits, xd[0])?;
    let tok = tape.linear(rows, lin.weight, lin.bias)?;
    let tok = tape.mask_rows(tok, &token_mask)?;
    Ok(TokenVar { tokens: tok, token_mask })
}

/// Standard patch projection of raw pixels. The token mask follows the
/// all-valid rule per patch.
pub fn patch_tokens_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, lin: &LinearParams<Var>, p: usize) -> Result<TokenVar> {
    let xd = tape.dims(x.value).to_vec();
    if xd.len() != 3 || xd[1..] != *x.mask.dims() {
        return Err(Error::shape("patch_embed", &xd, x.mask.dims()));
    }
    let layout = PatchLayout::new(xd[0], xd[1], xd[2], p)?;
    let bits = layout.patch_bits(&x.mask)?;
    let token_mask = ValidityMask::new(
        vec![layout.tokens()],
        bits.chunks_exact(p * p).map(|c| c.iter().all(|&b| b)).collect(),
    )?;
    let rows = tape.patchify(x.value, p)?;
    let tok = tape.linear(rows, lin.weight, lin.bias)?;
    Ok(TokenVar { tokens: tok, token_mask })
}

/// Mean over valid tokens; the result is valid iff some token is.
pub fn partial_global_pool_t<T: Scalar>(tape: &mut Tape<T>, t: &TokenVar) -> Result<(Var, bool)> {
    let v = tape.masked_mean_rows(t.tokens, &t.token_mask)?;
    Ok((v, t.token_mask.any_valid()))
}

/// Repeats a stride-1, same-size partial convolution until the mask is
/// all-ones.
pub fn fill_until_valid_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, p: &ConvParams<Var>, max_iters: usize) -> Result<(MaskedVar, usize)> {
    let fp = p.footprint;
    if fp.stride != 1 || fp.kernel_h.is_multiple_of(2) || fp.kernel_w.is_multiple_of(2) || fp.kernel_h != fp.kernel_w || fp.padding != fp.kernel_h / 2 {
        return Err(Error::invalid("fill_until_valid", format!("needs an odd same-size stride-1 footprint, got {fp:?}")));
    }
    if !x.mask.any_valid() {
        return Err(Error::NoValidData { op: "fill_until_valid" });
    }
    let mut cur = x.clone();
    let mut iters = 0;
    while !cur.mask.all_valid() {
        if iters == max_iters {
            return Err(Error::FillExhausted {
                iters,
                remaining: cur.mask.count_invalid(),
            });
        }
        cur = pconv2d_t(tape, &cur, p)?;
        iters += 1;
    }
    Ok((cur, iters))
}

fn run_masked<T: Scalar>(
    x: &MaskedTensor<T>,
    f: impl FnOnce(&mut Tape<T>, &MaskedVar) -> Result<MaskedVar>,
) -> Result<MaskedTensor<T>> {
    let mut tape = Tape::new();
    let xv = MaskedVar::constant(&mut tape, x);
    let y = f(&mut tape, &xv)?;
    y.read(&tape)
}

pub fn pconv2d<T: Scalar>(x: &MaskedTensor<T>, p: &ConvParams<Tensor<T>>) -> Result<MaskedTensor<T>> {
    run_masked(x, |tape, xv| {
        let pv = constants(tape, p);
        pconv2d_t(tape, xv, &pv)
    })
}

pub fn std_conv2d_masked<T: Scalar>(x: &MaskedTensor<T>, p: &ConvParams<Tensor<T>>) -> Result<MaskedTensor<T>> {
    run_masked(x, |tape, xv| {
        let pv = constants(tape, p);
        std_conv2d_masked_t(tape, xv, &pv)
    })
}

pub fn partial_avg_pool2d<T: Scalar>(x: &MaskedTensor<T>, fp: KernelFootprint) -> Result<MaskedTensor<T>> {
    run_masked(x, |tape, xv| partial_avg_pool2d_t(tape, xv, fp))
}

/// Partial projection of a single `C × P × P` patch to a token.
pub fn partial_linear<T: Scalar>(x_patch: &MaskedTensor<T>, p: &LinearParams<Tensor<T>>) -> Result<(Tensor<T>, bool)> {
    let d = x_patch.values().dims();
    if d.len() != 3 || d[1] != d[2] {
        return Err(Error::invalid("partial_linear", format!("expected a square C×P×P patch, got {d:?}")));
    }
    let (c, pp) = (d[0], d[1]);
    if p.weight.dims().len() != 2 || p.weight.dims()[1] != c * pp * pp {
        return Err(Error::shape("partial_linear", d, p.weight.dims()));
    }
    let seq = partial_patch_embed(x_patch, p, pp)?;
    let valid = seq.token_mask.get(0);
    let dim = seq.dim();
    Ok((seq.tokens.reshape(vec![dim])?, valid))
}

/// Partial patch embedding into a token sequence.
pub fn partial_patch_embed<T: Scalar>(x: &MaskedTensor<T>, p: &LinearParams<Tensor<T>>, patch: usize) -> Result<TokenSequence<T>> {
    let mut tape = Tape::new();
    let xv = MaskedVar::constant(&mut tape, x);
    let lin = constants(&mut tape, p);
    let t = partial_patch_tokens_t(&mut tape, &xv, &lin, patch)?;
    TokenSequence::new(tape.value(t.tokens).clone(), t.token_mask)
}

pub fn partial_global_pool<T: Scalar>(t: &TokenSequence<T>) -> Result<(Tensor<T>, bool)> {
    let mut tape = Tape::new();
    let tv = TokenVar {
        tokens: tape.constant(t.tokens.clone()),
        token_mask: t.token_mask.clone(),
    };
    let (v, valid) = partial_global_pool_t(&mut tape, &tv)?;
    Ok((tape.value(v).clone(), valid))
}

pub fn fill_until_valid<T: Scalar>(x: &MaskedTensor<T>, p: &ConvParams<Tensor<T>>, max_iters: usize) -> Result<(MaskedTensor<T>, usize)> {
    let mut tape = Tape::new();
    let xv = MaskedVar::constant(&mut tape, x);
    let pv = constants(&mut tape, p);
    let (y, iters) = fill_until_valid_t(&mut tape, &xv, &pv, max_iters)?;
    if iters == 0 {
        return Ok((x.clone(), 0));
    }
    Ok((y.read(&tape)?, iters))
}

/// Standard convolution with no mask, for reduction checks.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = constants(&mut tape, p);
    let y = tape.conv2d(xv, pv.weight, p.footprint.stride, p.footprint.padding)?;
    let y = tape.add_channel_bias(y, pv.bias)?;
    Ok(tape.value(y).clone())
}

pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, fp: KernelFootprint) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = avg_pool2d_t(&mut tape, xv, fp)?;
    Ok(tape.value(y).clone())
}

/// Standard linear map of a flattened patch.
pub fn linear<T: Scalar>(x: &Tensor<T>, p: &LinearParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(vec![x.numel()])?);
    let pv = constants(&mut tape, p);
    let y = tape.linear(xv, pv.weight, pv.bias)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: &[usize], bits: &[u8]) -> ValidityMask {
        ValidityMask::from_u8(dims.to_vec(), bits).unwrap()
    }

    fn averaging(k: usize, fp: KernelFootprint) -> ConvParams<Tensor<f32>> {
        ConvParams {
            weight: Tensor::full(vec![1, 1, k, k], 1.0 / (k * k) as f32),
            bias: Tensor::zeros(vec![1]),
            footprint: fp,
        }
    }

    #[test]
    fn pconv_mean_of_valid_window() {
        let values = Tensor::new(vec![1, 3, 3], vec![3.0, 50.0, 6.0, -7.0, 9.0, 11.0, 13.0, 17.0, 19.0]).unwrap();
        let m = mask(&[3, 3], &[1, 0, 1, 0, 1, 0, 0, 0, 0]);
        let x = MaskedTensor::new_raw(values, m).unwrap();
        let y = pconv2d(&x, &averaging(3, KernelFootprint::square(3, 1, 0))).unwrap();
        assert!((y.values().data()[0] - 6.0).abs() < 1e-6);
        assert!(y.mask().get(0));
    }

    #[test]
    fn pconv_1x1_over_invalid_pixel() {
        let x = MaskedTensor::new_raw(Tensor::full(vec![1, 1, 1], 4.0f32), mask(&[1, 1], &[0])).unwrap();
        let y = pconv2d(&x, &averaging(1, KernelFootprint::square(1, 1, 0))).unwrap();
        assert_eq!(y.values().data(), &[0.0]);
        assert!(!y.mask().get(0));
    }

    #[test]
    fn partial_linear_mean_pads() {
        // A 3-pixel patch is not square, so run the rule on the row form.
        let mut tape = Tape::<f64>::new();
        let rows = tape.constant(Tensor::new(vec![1, 3], vec![2.0, 4.0, 99.0]).unwrap());
        let padded = tape.mean_pad_patches(rows, &[true, true, false], 1).unwrap();
        let w = tape.constant(Tensor::full(vec![1, 3], 1.0 / 3.0));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.linear(padded, w, b).unwrap();
        assert!((tape.value(y).data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn partial_linear_fully_invalid_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LinearParams {
            bias: Tensor::full(vec![3], 0.5),
            ..LinearParams::init(&mut rng, 3, 4)
        };
        let x = MaskedTensor::new_raw(Tensor::full(vec![1, 2, 2], 7.0f32), ValidityMask::zeros(vec![2, 2])).unwrap();
        let (tok, valid) = partial_linear(&x, &p).unwrap();
        assert!(!valid);
        assert!(tok.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partial_avg_pool_ignores_invalid() {
        let x = MaskedTensor::new_raw(
            Tensor::new(vec![1, 1, 3], vec![1.0f32, 3.0, 100.0]).unwrap(),
            mask(&[1, 3], &[1, 1, 0]),
        )
        .unwrap();
        let y = partial_avg_pool2d(&x, KernelFootprint::new(1, 3, 1, 0)).unwrap();
        assert_eq!(y.values().data(), &[2.0]);
        assert!(y.mask().get(0));
        let x0 = MaskedTensor::new_raw(Tensor::full(vec![1, 1, 2], 5.0f32), ValidityMask::zeros(vec![1, 2])).unwrap();
        let y0 = partial_avg_pool2d(&x0, KernelFootprint::new(1, 2, 1, 0)).unwrap();
        assert_eq!(y0.values().data(), &[0.0]);
        assert!(!y0.mask().get(0));
    }

    #[test]
    fn global_pool_rules() {
        let tokens = Tensor::new(vec![3, 2], vec![1.0f32, 2.0, 55.0, -9.0, 3.0, 6.0]).unwrap();
        let t = TokenSequence::new(tokens.clone(), mask(&[3], &[1, 0, 1])).unwrap();
        let (v, ok) = partial_global_pool(&t).unwrap();
        assert_eq!(v.data(), &[2.0, 4.0]);
        assert!(ok);
        let mut junk = tokens;
        junk.data_mut()[2] = -1e6;
        let (v2, _) = partial_global_pool(&TokenSequence::new(junk, mask(&[3], &[1, 0, 1])).unwrap()).unwrap();
        assert!(v.bit_eq(&v2));
        let none = TokenSequence::new(Tensor::full(vec![2, 2], 1.0f32), ValidityMask::zeros(vec![2])).unwrap();
        let (v3, ok3) = partial_global_pool(&none).unwrap();
        assert_eq!(v3.data(), &[0.0, 0.0]);
        assert!(!ok3);
    }

    #[test]
    fn std_conv_center_invalid_erodes_everything() {
        let x = MaskedTensor::new(Tensor::full(vec![1, 3, 3], 1.0f32), mask(&[3, 3], &[1, 1, 1, 1, 0, 1, 1, 1, 1])).unwrap();
        let y = std_conv2d_masked(&x, &averaging(3, KernelFootprint::same(3))).unwrap();
        assert!(!y.mask().any_valid());
    }

    #[test]
    fn fill_single_center_pixel_takes_two_passes() {
        let mut bits = vec![0u8; 25];
        bits[12] = 1;
        let x = MaskedTensor::new(Tensor::full(vec![1, 5, 5], 2.0f32), mask(&[5, 5], &bits)).unwrap();
        let (y, iters) = fill_until_valid(&x, &averaging(3, KernelFootprint::same(3)), 10).unwrap();
        assert_eq!(iters, 2);
        assert!(y.mask().all_valid());
    }

    #[test]
    fn fill_errors() {
        let p = averaging(3, KernelFootprint::same(3));
        let none = MaskedTensor::new(Tensor::zeros(vec![1, 4, 4]), ValidityMask::zeros(vec![4, 4])).unwrap();
        assert!(matches!(fill_until_valid(&none, &p, 5), Err(Error::NoValidData { .. })));
        let mut bits = vec![0u8; 64];
        bits[0] = 1;
        let one = MaskedTensor::new(Tensor::zeros(vec![1, 8, 8]), mask(&[8, 8], &bits)).unwrap();
        match fill_until_valid(&one, &p, 2) {
            Err(Error::FillExhausted { iters: 2, remaining }) => assert_eq!(remaining, 64 - 9),
            other => panic!("{other:?}"),
        }
        let full = MaskedTensor::fully_valid(Tensor::full(vec![1, 3, 3], 1.5f32)).unwrap();
        let (y, iters) = fill_until_valid(&full, &p, 0).unwrap();
        assert_eq!(iters, 0);
        assert_eq!(y, full);
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (MaskedTensor<f32>, ConvParams<Tensor<f32>>) {
        let (c, k) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let kk = [1, 3, 5][rng.gen_range(0..3)];
        let fp = KernelFootprint::square(kk, rng.gen_range(1..3), rng.gen_range(0..=kk / 2));
        let (h, w) = (rng.gen_range(kk..12), rng.gen_range(kk..12));
        let mut p = ConvParams::init(rng, k, c, fp);
        p.bias = Tensor::from_fn(vec![k], |_| rng.gen_range(-1.0..1.0));
        let bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.6)).collect();
        let values = Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-2.0..2.0));
        (MaskedTensor::new(values, ValidityMask::new(vec![h, w], bits).unwrap()).unwrap(), p)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pconv_is_placeholder_agnostic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, p) = random_case(&mut rng);
            let noisy = x.with_placeholders(|| rng.gen_range(-100.0..100.0));
            let a = pconv2d(&x, &p).unwrap();
            let b = pconv2d(&noisy, &p).unwrap();
            prop_assert!(a.values().bit_eq(b.values()));
            prop_assert_eq!(a.mask(), b.mask());
            let rule = propagate_receptive_field(x.mask(), &p.footprint, ValidityRule::AnyValid).unwrap();
            prop_assert_eq!(a.mask(), &rule);
            prop_assert!(a.placeholders_are_zero());
        }

        #[test]
        fn avg_pool_is_placeholder_agnostic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, p) = random_case(&mut rng);
            let noisy = x.with_placeholders(|| rng.gen_range(-100.0..100.0));
            let a = partial_avg_pool2d(&x, p.footprint).unwrap();
            let b = partial_avg_pool2d(&noisy, p.footprint).unwrap();
            prop_assert!(a.values().bit_eq(b.values()));
            prop_assert_eq!(a.mask(), b.mask());
        }

        #[test]
        fn all_valid_reductions(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, mut p) = random_case(&mut rng);
            p.footprint.padding = 0;
            let full = MaskedTensor::fully_valid(x.values().clone()).unwrap();
            let a = pconv2d(&full, &p).unwrap();
            let b = conv2d(full.values(), &p).unwrap();
            prop_assert!(a.values().max_abs_diff(&b).unwrap() <= 1e-6);
            let pa = partial_avg_pool2d(&full, p.footprint).unwrap();
            let pb = avg_pool2d(full.values(), p.footprint).unwrap();
            prop_assert!(pa.values().max_abs_diff(&pb).unwrap() <= 1e-6);
        }

        #[test]
        fn fill_respects_chebyshev_bound(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let mut bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.05)).collect();
            let first = rng.gen_range(0..h * w);
            bits[first] = true;
            let m = ValidityMask::new(vec![h, w], bits).unwrap();
            let radius = (0..h * w)
                .map(|i| {
                    (0..h * w)
                        .filter(|&j| m.get(j))
                        .map(|j| (i / w).abs_diff(j / w).max((i % w).abs_diff(j % w)))
                        .min()
                        .unwrap()
                })
                .max()
                .unwrap();
            let x = MaskedTensor::new(Tensor::full(vec![1, h, w], 1.0f32), m).unwrap();
            let (y, iters) = fill_until_valid(&x, &averaging(3, KernelFootprint::same(3)), 100).unwrap();
            prop_assert!(iters <= radius);
            prop_assert!(y.mask().all_valid());
        }
    }

    #[test]
    fn std_conv_is_placeholder_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ConvParams::init(&mut rng, 2, 1, KernelFootprint::same(3));
        let x = MaskedTensor::new(Tensor::full(vec![1, 4, 4], 1.0f32), ValidityMask::new(vec![4, 4], (0..16).map(|i| i != 5).collect()).unwrap()).unwrap();
        let noisy = x.with_placeholders(|| 3.0);
        let a = std_conv2d_masked(&x, &p).unwrap();
        let b = std_conv2d_masked(&noisy, &p).unwrap();
        assert!(!a.values().bit_eq(b.values()));
    }

    #[test]
    fn gradient_at_invalid_inputs_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (x, p) = random_case(&mut rng);
            let x = x.with_placeholders(|| rng.gen_range(-1.0..1.0));
            let x64 = MaskedTensor::new_raw(x.values().cast::<f64>(), x.mask().clone()).unwrap();
            let p64: ConvParams<Tensor<f64>> = crate::params::cast(&p);
            let mut tape = Tape::<f64>::new();
            let xv = MaskedVar::leaf(&mut tape, &x64);
            let pv = constants(&mut tape, &p64);
            let y = pconv2d_t(&mut tape, &xv, &pv).unwrap();
            let pooled = partial_avg_pool2d_t(&mut tape, &xv, p.footprint).unwrap();
            let s1 = tape.sum_all(y.value);
            let s2 = tape.sum_all(pooled.value);
            let s = tape.add(s1, s2).unwrap();
            let g = tape.backward(s).unwrap();
            let gx = g.get(xv.value).unwrap();
            let plane = x.mask().len();
            for (i, &v) in gx.data().iter().enumerate() {
                if !x.mask().get(i % plane) {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn pconv_grad_check_partially_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let (x, p) = random_case(&mut rng);
            let p64: ConvParams<Tensor<f64>> = crate::params::cast(&p);
            let mask = x.mask().clone();
            let fp = p.footprint;
            let inputs = vec![x.values().cast::<f64>(), p64.weight.clone(), p64.bias.clone()];
            let probe = {
                let mut t = Tape::<f64>::new();
                let xv = MaskedVar { value: t.constant(inputs[0].clone()), mask: mask.clone() };
                let pv = ConvParams { weight: t.constant(inputs[1].clone()), bias: t.constant(inputs[2].clone()), footprint: fp };
                let y = pconv2d_t(&mut t, &xv, &pv).unwrap();
                t.dims(y.value).to_vec()
            };
            let w = Tensor::from_fn(probe, |_| rng.gen_range(-1.0..1.0));
            let r = crate::autodiff::grad_check(&inputs, 1e-6, |t, v| {
                let xv = MaskedVar { value: v[0], mask: mask.clone() };
                let pv = ConvParams { weight: v[1], bias: v[2], footprint: fp };
                let y = pconv2d_t(t, &xv, &pv)?;
                crate::autodiff::weighted_sum_loss(t, y.value, &w)
            })
            .unwrap();
            assert!(r.max_rel_err <= 1e-5, "{r:?}");
        }
    }
}
