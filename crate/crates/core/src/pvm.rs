//! The partial vision-mamba block and its mask-unaware counterpart.
//!
//! ```text
//! pvm: x ─ partial patch embed ─ substitute invalid tokens ─ block ─ reconstruct   (mask: all ones)
//! vm:  x ─ patch embed ──────────────────────────────────── block ─ reconstruct   (mask: bookkeeping)
//! ```
//!
//! Both paths share one parameter layout, so a fully valid input gives
//! bit-identical outputs on either path.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{propagate_sequence, ScanDirection, ValidityRule};
use crate::params::{constants, param_tree, BlockParams, LinearParams, LAYER_NORM_EPS};
use crate::partial::{partial_patch_tokens_t, patch_tokens_t, MaskedVar, TokenVar};
use crate::ssm::{vm_block_t, BlockOptions};
use crate::tensor::{MaskedTensor, Scalar, Tensor, TokenSequence, ValidityMask};

/// What replaces invalid tokens before the scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenPadding {
    Zero,
    Mean,
    #[default]
    Learned,
}

impl TokenPadding {
    pub const ALL: [TokenPadding; 3] = [TokenPadding::Zero, TokenPadding::Mean, TokenPadding::Learned];

    pub fn name(self) -> &'static str {
        match self {
            TokenPadding::Zero => "zero",
            TokenPadding::Mean => "mean",
            TokenPadding::Learned => "learned",
        }
    }
}

/// Whether substitution happens before or after the block's normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstituteOrder {
    #[default]
    BeforeNorm,
    AfterNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PvmOptions {
    pub patch: usize,
    pub padding: TokenPadding,
    pub direction: ScanDirection,
    pub order: SubstituteOrder,
}

impl PvmOptions {
    pub fn new(patch: usize) -> Self {
        Self {
            patch,
            padding: TokenPadding::Learned,
            direction: ScanDirection::Bidirectional,
            order: SubstituteOrder::BeforeNorm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PvmParams<W = Tensor<f32>> {
    /// `D × C·P²`.
    pub embed: LinearParams<W>,
    /// Learned mask token, `D`.
    pub tau: W,
    pub block: BlockParams<W>,
    /// `C·P² × D`, followed by the inverse patch split.
    pub recon: LinearParams<W>,
}
param_tree!(PvmParams { leaves: [tau], nested: [embed, block, recon], plain: [] });

impl PvmParams {
    pub fn init(rng: &mut impl Rng, channels: usize, patch: usize, dim: usize, expand: usize, states: usize) -> Self {
        let width = channels * patch * patch;
        let tau_dist = Normal::new(0.0, 0.02).expect("positive std");
        Self {
            embed: LinearParams::init(rng, dim, width),
            tau: Tensor::from_fn(vec![dim], |_| tau_dist.sample(rng) as f32),
            block: BlockParams::init(rng, dim, expand, states),
            recon: LinearParams::init(rng, width, dim),
        }
    }
}

/// Dense `L × D` sequence with invalid rows replaced by `fill`.
pub fn substitute_tokens_t<T: Scalar>(tape: &mut Tape<T>, tokens: Var, token_mask: &ValidityMask, fill: Var) -> Result<Var> {
    tape.substitute_rows(tokens, fill, token_mask)
}

fn padding_fill<T: Scalar>(tape: &mut Tape<T>, t: &TokenVar, tau: Var, padding: TokenPadding) -> Result<Var> {
    Ok(match padding {
        TokenPadding::Learned => tau,
        TokenPadding::Zero => tape.constant(Tensor::zeros(tape.dims(tau).to_vec())),
        TokenPadding::Mean => tape.masked_mean_rows(t.tokens, &t.token_mask)?,
    })
}

fn block_and_reconstruct<T: Scalar>(tape: &mut Tape<T>, seq: Var, dims: &[usize], p: &PvmParams<Var>, opts: &PvmOptions, skip_norm: bool) -> Result<Var> {
    let y = vm_block_t(
        tape,
        seq,
        &p.block,
        BlockOptions {
            direction: opts.direction,
            skip_norm,
        },
    )?;
    let rows = tape.linear(y, p.recon.weight, p.recon.bias)?;
    tape.unpatchify(rows, dims[0], dims[1], dims[2], opts.patch)
}

/// Non-residual role: a fully valid map from any input with a valid pixel.
pub fn pvm_forward_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, p: &PvmParams<Var>, opts: &PvmOptions) -> Result<MaskedVar> {
    if !x.mask.any_valid() {
        return Err(Error::NoValidData { op: "pvm_forward" });
    }
    let dims = tape.dims(x.value).to_vec();
    let t = partial_patch_tokens_t(tape, x, &p.embed, opts.patch)?;
    let fill = padding_fill(tape, &t, p.tau, opts.padding)?;
    let seq = match opts.order {
        SubstituteOrder::BeforeNorm => substitute_tokens_t(tape, t.tokens, &t.token_mask, fill)?,
        SubstituteOrder::AfterNorm => {
            let eps = T::from_f64_lossy(LAYER_NORM_EPS);
            let n = tape.layer_norm(t.tokens, p.block.norm.gamma, p.block.norm.beta, eps)?;
            substitute_tokens_t(tape, n, &t.token_mask, fill)?
        }
    };
    let skip_norm = opts.order == SubstituteOrder::AfterNorm;
    let y = block_and_reconstruct(tape, seq, &dims, p, opts, skip_norm)?;
    Ok(MaskedVar {
        value: y,
        mask: ValidityMask::ones(x.mask.dims().to_vec()),
    })
}

/// Residual role: `x + pvm(x)` on input-valid positions, zero elsewhere,
/// with the input mask retained.
pub fn pvm_residual_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, p: &PvmParams<Var>, opts: &PvmOptions) -> Result<MaskedVar> {
    let y = pvm_forward_t(tape, x, p, opts)?;
    let s = tape.add(x.value, y.value)?;
    let s = tape.mask_positions(s, &x.mask)?;
    Ok(MaskedVar {
        value: s,
        mask: x.mask.clone(),
    })
}

/// Mask-unaware path on raw values. A token is valid only if its whole
/// patch is, and any invalid token invalidates the whole scanned sequence.
pub fn vm_forward_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, p: &PvmParams<Var>, opts: &PvmOptions) -> Result<MaskedVar> {
    let dims = tape.dims(x.value).to_vec();
    let t = patch_tokens_t(tape, x, &p.embed, opts.patch)?;
    let seq_mask = propagate_sequence(&t.token_mask, opts.direction, ValidityRule::AllValid)?;
    let y = block_and_reconstruct(tape, t.tokens, &dims, p, opts, false)?;
    let valid = seq_mask.all_valid();
    Ok(MaskedVar {
        value: y,
        mask: ValidityMask::filled(x.mask.dims().to_vec(), valid),
    })
}

/// `x + vm(x)` with the AND of both masks.
pub fn vm_residual_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, p: &PvmParams<Var>, opts: &PvmOptions) -> Result<MaskedVar> {
    let y = vm_forward_t(tape, x, p, opts)?;
    let s = tape.add(x.value, y.value)?;
    Ok(MaskedVar {
        value: s,
        mask: x.mask.and(&y.mask)?,
    })
}

type BlockFn<T> = fn(&mut Tape<T>, &MaskedVar, &PvmParams<Var>, &PvmOptions) -> Result<MaskedVar>;

fn run<T: Scalar>(f: BlockFn<T>, x: &MaskedTensor<T>, p: &PvmParams<Tensor<T>>, opts: &PvmOptions) -> Result<MaskedTensor<T>> {
    let mut tape = Tape::new();
    let xv = MaskedVar::constant(&mut tape, x);
    let pv = constants(&mut tape, p);
    f(&mut tape, &xv, &pv, opts)?.read(&tape)
}

pub fn pvm_forward<T: Scalar>(x: &MaskedTensor<T>, p: &PvmParams<Tensor<T>>, opts: &PvmOptions) -> Result<MaskedTensor<T>> {
    run(pvm_forward_t, x, p, opts)
}

pub fn pvm_residual<T: Scalar>(x: &MaskedTensor<T>, p: &PvmParams<Tensor<T>>, opts: &PvmOptions) -> Result<MaskedTensor<T>> {
    run(pvm_residual_t, x, p, opts)
}

pub fn vm_forward<T: Scalar>(x: &MaskedTensor<T>, p: &PvmParams<Tensor<T>>, opts: &PvmOptions) -> Result<MaskedTensor<T>> {
    run(vm_forward_t, x, p, opts)
}

/// `[t₁, τ, t₃, …]`: invalid tokens replaced by `tau`.
pub fn substitute_masked_tokens<T: Scalar>(t: &TokenSequence<T>, tau: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let tokens = tape.constant(t.tokens.clone());
    let fill = tape.constant(tau.clone());
    let y = substitute_tokens_t(&mut tape, tokens, &t.token_mask, fill)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, weighted_sum_loss};
    use crate::params::{cast, rebind, slots};
    use crate::partial::partial_patch_embed;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, p_valid: f64) -> MaskedTensor<f32> {
        let mut bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(p_valid)).collect();
        let i = rng.gen_range(0..h * w);
        bits[i] = true;
        let v = Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-1.0..1.0));
        MaskedTensor::new(v, ValidityMask::new(vec![h, w], bits).unwrap()).unwrap()
    }

    fn setup(seed: u64) -> (ChaCha8Rng, PvmParams, PvmOptions, MaskedTensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = rng.gen_range(1..3);
        let c = rng.gen_range(1..3);
        let p = PvmParams::init(&mut rng, c, patch, 6, 2, 3);
        let (gh, gw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = random_input(&mut rng, c, gh * patch, gw * patch, 0.5);
        let mut opts = PvmOptions::new(patch);
        opts.padding = TokenPadding::ALL[rng.gen_range(0..3)];
        opts.order = [SubstituteOrder::BeforeNorm, SubstituteOrder::AfterNorm][rng.gen_range(0..2)];
        (rng, p, opts, x)
    }

    #[test]
    fn substitution_places_tau() {
        let tokens = Tensor::new(vec![3, 2], vec![1.0f32, 2.0, 0.0, 0.0, 5.0, 6.0]).unwrap();
        let t = TokenSequence::new(tokens.clone(), ValidityMask::from_u8(vec![3], &[1, 0, 1]).unwrap()).unwrap();
        let tau = Tensor::new(vec![2], vec![-1.0, -2.0]).unwrap();
        let y = substitute_masked_tokens(&t, &tau).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, -1.0, -2.0, 5.0, 6.0]);
        let all = TokenSequence::new(tokens.clone(), ValidityMask::ones(vec![3])).unwrap();
        assert!(substitute_masked_tokens(&all, &tau).unwrap().bit_eq(&tokens));
    }

    #[test]
    fn tau_gradient_sums_substituted_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = ValidityMask::from_u8(vec![4], &[0, 1, 0, 0]).unwrap();
        let inputs = vec![
            Tensor::from_fn(vec![4, 3], |_| rng.gen_range(-1.0..1.0)),
            Tensor::from_fn(vec![3], |_| rng.gen_range(-1.0..1.0)),
        ];
        let w = Tensor::from_fn(vec![4, 3], |_| rng.gen_range(-1.0..1.0));
        let r = grad_check(&inputs, 1e-6, |t, v| {
            let y = substitute_tokens_t(t, v[0], &mask, v[1])?;
            weighted_sum_loss(t, y, &w)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-7);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(inputs[0].clone());
        let tau = tape.leaf(inputs[1].clone());
        let y = substitute_tokens_t(&mut tape, x, &mask, tau).unwrap();
        let loss = weighted_sum_loss(&mut tape, y, &w).unwrap();
        let g = tape.backward(loss).unwrap();
        for k in 0..3 {
            let expect = w.data()[k] + w.data()[6 + k] + w.data()[9 + k];
            assert!((g.get(tau).unwrap().data()[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_valid_pvm_equals_vm() {
        for seed in 0..20 {
            let (_, p, opts, x) = setup(seed);
            let full = MaskedTensor::fully_valid(x.values().clone()).unwrap();
            let opts = PvmOptions {
                order: SubstituteOrder::BeforeNorm,
                ..opts
            };
            let a = pvm_forward(&full, &p, &opts).unwrap();
            let b = vm_forward(&full, &p, &opts).unwrap();
            assert!(a.values().bit_eq(b.values()), "seed {seed}");
            assert!(b.mask().all_valid());
        }
    }

    #[test]
    fn vm_bookkeeping_invalidates_everything() {
        let (_, p, opts, mut x) = setup(3);
        let mut m = ValidityMask::ones(x.mask().dims().to_vec());
        m.bits_mut()[0] = false;
        x = MaskedTensor::new(x.values().clone(), m).unwrap();
        let y = vm_forward(&x, &p, &opts).unwrap();
        assert!(!y.mask().any_valid());
    }

    #[test]
    fn residual_stack_keeps_mask_then_densifies() {
        let (mut rng, p, opts, x) = setup(4);
        let ps: Vec<PvmParams> = (0..3)
            .map(|_| PvmParams::init(&mut rng, x.channels(), opts.patch, 6, 2, 3))
            .collect();
        let mut h = x.clone();
        for q in &ps[..2] {
            h = pvm_residual(&h, q, &opts).unwrap();
            assert_eq!(h.mask(), x.mask());
            assert!(h.placeholders_are_zero());
        }
        let out = pvm_forward(&h, &ps[2], &opts).unwrap();
        assert!(out.mask().all_valid());
        let _ = p;
    }

    #[test]
    fn all_invalid_input_is_rejected() {
        let (_, p, opts, x) = setup(5);
        let dead = MaskedTensor::new(x.values().clone(), ValidityMask::zeros(x.mask().dims().to_vec())).unwrap();
        assert!(matches!(pvm_forward(&dead, &p, &opts), Err(Error::NoValidData { .. })));
        assert!(pvm_residual(&dead, &p, &opts).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pvm_is_placeholder_agnostic(seed in any::<u64>()) {
            let (mut rng, p, opts, x) = setup(seed);
            let noisy = x.with_placeholders(|| rng.gen_range(-50.0..50.0));
            let a = pvm_forward(&x, &p, &opts).unwrap();
            let b = pvm_forward(&noisy, &p, &opts).unwrap();
            prop_assert!(a.values().bit_eq(b.values()));
            prop_assert!(a.mask().all_valid());
            let ra = pvm_residual(&x, &p, &opts).unwrap();
            let rb = pvm_residual(&noisy, &p, &opts).unwrap();
            prop_assert!(ra.values().bit_eq(rb.values()));
            prop_assert_eq!(ra.mask(), x.mask());
        }

        #[test]
        fn token_mask_is_patchwise_any_valid(seed in any::<u64>()) {
            let (_, p, opts, x) = setup(seed);
            let t = partial_patch_embed(&x, &p.embed, opts.patch).unwrap();
            let (h, w) = x.mask().hw().unwrap();
            let gw = w / opts.patch;
            for l in 0..t.len() {
                let (pi, pj) = (l / gw, l % gw);
                let any = (0..opts.patch * opts.patch).any(|q| {
                    let (a, b) = (q / opts.patch, q % opts.patch);
                    x.mask().get((pi * opts.patch + a) * w + pj * opts.patch + b)
                });
                prop_assert_eq!(t.token_mask.get(l), any);
            }
            let _ = h;
        }
    }

    #[test]
    fn vm_is_placeholder_sensitive_on_partial_patches() {
        let mut failures = 0;
        let mut cases = 0;
        for seed in 0..40 {
            let (mut rng, p, opts, x) = setup(seed);
            if x.mask().all_valid() {
                continue;
            }
            cases += 1;
            let noisy = x.with_placeholders(|| rng.gen_range(-50.0..50.0));
            let a = vm_forward(&x, &p, &opts).unwrap();
            let b = vm_forward(&noisy, &p, &opts).unwrap();
            failures += usize::from(!a.values().bit_eq(b.values()));
        }
        assert_eq!(failures, cases);
    }

    #[test]
    fn pvm_gradients_ignore_invalid_inputs_and_check_out() {
        for seed in 0..3 {
            let (mut rng, p, opts, x) = setup(seed + 50);
            let x = x.with_placeholders(|| rng.gen_range(-1.0..1.0));
            let p64: PvmParams<Tensor<f64>> = cast(&p);
            let mask = x.mask().clone();
            let mut inputs = vec![x.values().cast::<f64>()];
            inputs.extend(slots(&p64));
            let w = Tensor::from_fn(x.values().dims().to_vec(), |_| rng.gen_range(-1.0..1.0));
            let build = |t: &mut Tape<f64>, v: &[Var]| {
                let pv = rebind(&p64, &v[1..]);
                let xv = MaskedVar { value: v[0], mask: mask.clone() };
                let y = pvm_residual_t(t, &xv, &pv, &opts)?;
                weighted_sum_loss(t, y.value, &w)
            };
            let r = grad_check(&inputs, 1e-6, build).unwrap();
            assert!(r.max_rel_err <= 1e-4, "{r:?}");

            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars).unwrap();
            let g = tape.backward(loss).unwrap();
            let gx = g.get(vars[0]).unwrap();
            let plane = mask.len();
            for (i, &v) in gx.data().iter().enumerate() {
                if !mask.get(i % plane) {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}
