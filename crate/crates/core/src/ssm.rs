//! Selective state-space scan and the gated block around it.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::ScanDirection;
use crate::params::{constants, BlockParams, SsmParams, LAYER_NORM_EPS};
use crate::tensor::{Scalar, Tensor};

/// `u: L × E` through the scan with token-dependent `Δ`, `B`, `C`.
pub fn selective_scan_t<T: Scalar>(tape: &mut Tape<T>, u: Var, p: &SsmParams<Var>, direction: ScanDirection) -> Result<Var> {
    let pre = tape.linear(u, p.w_delta, p.delta_bias)?;
    let delta = tape.softplus(pre);
    let ea = tape.exp(p.a_log);
    let a = tape.neg(ea);
    let wb = tape.transpose(p.w_b)?;
    let b = tape.matmul(u, wb)?;
    let wc = tape.transpose(p.w_c)?;
    let c = tape.matmul(u, wc)?;
    tape.selective_scan(u, delta, a, b, c, p.d_skip, direction)
}

/// Which parts of the block to run; `skip_norm` lets callers normalize
/// before substituting tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOptions {
    pub direction: ScanDirection,
    pub skip_norm: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            direction: ScanDirection::Bidirectional,
            skip_norm: false,
        }
    }
}

/// normalize → (stream, gate) → scan(stream) ⊙ silu(gate) → project back.
pub fn vm_block_t<T: Scalar>(tape: &mut Tape<T>, t: Var, p: &BlockParams<Var>, opts: BlockOptions) -> Result<Var> {
    let dims = tape.dims(t).to_vec();
    let [_, d] = dims[..] else {
        return Err(Error::invalid("vm_block", format!("expected L×D tokens, got {dims:?}")));
    };
    if tape.dims(p.in_proj.weight).get(1) != Some(&d) {
        return Err(Error::shape("vm_block", &dims, tape.dims(p.in_proj.weight)));
    }
    let e = tape.dims(p.in_proj.weight)[0] / 2;
    let n = if opts.skip_norm {
        t
    } else {
        tape.layer_norm(t, p.norm.gamma, p.norm.beta, T::from_f64_lossy(LAYER_NORM_EPS))?
    };
    let z = tape.linear(n, p.in_proj.weight, p.in_proj.bias)?;
    let stream = tape.narrow_cols(z, 0, e)?;
    let gate = tape.narrow_cols(z, e, e)?;
    let y = selective_scan_t(tape, stream, &p.ssm, opts.direction)?;
    let g = tape.silu(gate);
    let y = tape.mul(y, g)?;
    tape.linear(y, p.out_proj.weight, p.out_proj.bias)
}

pub fn selective_scan<T: Scalar>(u: &Tensor<T>, p: &SsmParams<Tensor<T>>, direction: ScanDirection) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone());
    let pv = constants(&mut tape, p);
    let y = selective_scan_t(&mut tape, uv, &pv, direction)?;
    Ok(tape.value(y).clone())
}

pub fn vm_block<T: Scalar>(t: &Tensor<T>, p: &BlockParams<Tensor<T>>, direction: ScanDirection) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let tv = tape.constant(t.clone());
    let pv = constants(&mut tape, p);
    let y = vm_block_t(&mut tape, tv, &pv, BlockOptions { direction, skip_norm: false })?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, weighted_sum_loss};
    use crate::params::{bind, cast, named, rebind, slots};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reverse_rows(t: &Tensor<f64>) -> Tensor<f64> {
        let d = t.dims()[1];
        let data = t.data().chunks_exact(d).rev().flatten().copied().collect();
        Tensor::new(t.dims().to_vec(), data).unwrap()
    }

    fn setup(seed: u64, l: usize, e: usize, n: usize) -> (Tensor<f64>, SsmParams<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SsmParams::init(&mut rng, e, n);
        let mut p: SsmParams<Tensor<f64>> = cast(&p);
        p.w_delta = Tensor::from_fn(vec![e, e], |_| rng.gen_range(-0.5..0.5));
        p.delta_bias = Tensor::from_fn(vec![e], |_| rng.gen_range(-1.0..0.5));
        let u = Tensor::from_fn(vec![l, e], |_| rng.gen_range(-1.0..1.0));
        (u, p)
    }

    #[test]
    fn tiny_delta_leaves_only_skip() {
        let (u, mut p) = setup(1, 5, 3, 2);
        p.w_delta = Tensor::zeros(vec![3, 3]);
        p.delta_bias = Tensor::full(vec![3], -40.0);
        let y = selective_scan(&u, &p, ScanDirection::Forward).unwrap();
        let skip: Vec<f64> = u.data().iter().enumerate().map(|(i, &v)| v * p.d_skip.data()[i % 3]).collect();
        for (a, b) in y.data().iter().zip(skip) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_reversed_forward_of_reversed() {
        let (u, p) = setup(2, 6, 3, 4);
        let b = selective_scan(&u, &p, ScanDirection::Backward).unwrap();
        let f = selective_scan(&reverse_rows(&u), &p, ScanDirection::Forward).unwrap();
        assert!(b.bit_eq(&reverse_rows(&f)));
    }

    #[test]
    fn zero_out_projection_gives_zero_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BlockParams::init_zero_out(&mut rng, 4, 2, 3);
        let t = Tensor::from_fn(vec![5, 4], |_| rng.gen_range(-1.0f32..1.0));
        let y = vm_block(&t, &p, ScanDirection::Bidirectional).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_bidirectional_doubles_scan_part() {
        let (u, p) = setup(4, 1, 3, 2);
        let mut p0 = p.clone();
        p0.d_skip = Tensor::zeros(vec![3]);
        let f = selective_scan(&u, &p0, ScanDirection::Forward).unwrap();
        let bi = selective_scan(&u, &p0, ScanDirection::Bidirectional).unwrap();
        for (a, b) in bi.data().iter().zip(f.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_tokens_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BlockParams::init(&mut rng, 4, 2, 3);
        let t = Tensor::from_fn(vec![6, 4], |_| rng.gen_range(-1.0f32..1.0));
        let mut swapped = t.clone();
        let (a, b) = swapped.data_mut().split_at_mut(4);
        a.swap_with_slice(&mut b[..4]);
        let y = vm_block(&t, &p, ScanDirection::Forward).unwrap();
        let ys = vm_block(&swapped, &p, ScanDirection::Forward).unwrap();
        assert!(!y.bit_eq(&ys));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn forward_scan_is_causal(seed in any::<u64>(), cut in 0usize..7) {
            let (u, p) = setup(seed, 8, 3, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mut v = u.clone();
            for x in &mut v.data_mut()[(cut + 1) * 3..] {
                *x = rng.gen_range(-5.0..5.0);
            }
            let a = selective_scan(&u, &p, ScanDirection::Forward).unwrap();
            let b = selective_scan(&v, &p, ScanDirection::Forward).unwrap();
            prop_assert_eq!(&a.data()[..(cut + 1) * 3], &b.data()[..(cut + 1) * 3]);
        }

        #[test]
        fn bidirectional_reversal_symmetry(seed in any::<u64>()) {
            let (u, p) = setup(seed, 7, 3, 3);
            let y = selective_scan(&u, &p, ScanDirection::Bidirectional).unwrap();
            let yr = selective_scan(&reverse_rows(&u), &p, ScanDirection::Bidirectional).unwrap();
            prop_assert!(reverse_rows(&y).bit_eq(&yr));
        }

        #[test]
        fn states_stay_bounded(seed in any::<u64>()) {
            let (u, p) = setup(seed, 64, 2, 2);
            let y = selective_scan(&u, &p, ScanDirection::Forward).unwrap();
            prop_assert!(y.all_finite());
            prop_assert!(y.data().iter().all(|v| v.abs() < 1e3));
        }
    }

    #[test]
    fn scan_parameters_pass_grad_check() {
        for seed in 0..4 {
            let (u, p) = setup(seed, 8, 2, 2);
            let mut inputs = vec![u];
            inputs.extend(slots(&p));
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let w = Tensor::from_fn(vec![8, 2], |_| rng.gen_range(-1.0..1.0));
            for dir in [ScanDirection::Forward, ScanDirection::Bidirectional] {
                let r = grad_check(&inputs, 1e-6, |t, v| {
                    let pv = rebind(&p, &v[1..]);
                    let y = selective_scan_t(t, v[0], &pv, dir)?;
                    weighted_sum_loss(t, y, &w)
                })
                .unwrap();
                assert!(r.max_rel_err <= 1e-4, "{dir:?} {r:?}");
            }
        }
    }

    #[test]
    fn block_gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: BlockParams<Tensor<f64>> = cast(&BlockParams::init(&mut rng, 3, 2, 2));
        let t = Tensor::from_fn(vec![4, 3], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::<f64>::new();
        let tv = tape.constant(t);
        let pv = bind(&mut tape, &p);
        let y = vm_block_t(&mut tape, tv, &pv, BlockOptions::default()).unwrap();
        let s = tape.mul(y, y).unwrap();
        let loss = tape.sum_all(s);
        let g = tape.backward(loss).unwrap();
        for name in named(&p).keys() {
            assert!(g.param(name).is_ok(), "{name}");
        }
    }
}
