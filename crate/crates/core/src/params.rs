//! Parameter bundles.
//!
//! Every bundle is generic over its slot type `W`. Stored weights use
//! `Tensor<f32>`; a forward pass binds them to tape handles (`Var`) with
//! [`bind`] or [`constants`], so the same forward code serves training,
//! inference and 64-bit gradient checks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Adam, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::KernelFootprint;
use crate::tensor::{Scalar, Tensor};

/// A tree of named slots.
pub trait ParamTree<W> {
    type Mapped<U>;

    fn map<U>(&self, path: &str, f: &mut dyn FnMut(&str, &W) -> U) -> Self::Mapped<U>;

    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &W));

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut W));
}

pub(crate) fn join(path: &str, field: &str) -> String {
    if path.is_empty() {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

impl<W, P: ParamTree<W>> ParamTree<W> for Vec<P> {
    type Mapped<U> = Vec<P::Mapped<U>>;

    fn map<U>(&self, path: &str, f: &mut dyn FnMut(&str, &W) -> U) -> Self::Mapped<U> {
        self.iter()
            .enumerate()
            .map(|(i, p)| p.map(&join(path, &i.to_string()), f))
            .collect()
    }

    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &W)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(path, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut W)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(path, &i.to_string()), f);
        }
    }
}

/// Implements [`ParamTree`] for a struct with leaf slots, nested bundles and
/// plain copied fields.
macro_rules! param_tree {
    ($name:ident { leaves: [$($leaf:ident),*], nested: [$($child:ident),*], plain: [$($plain:ident),*] }) => {
        impl<W> $crate::params::ParamTree<W> for $name<W> {
            type Mapped<U> = $name<U>;

            fn map<U>(&self, path: &str, f: &mut dyn FnMut(&str, &W) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&$crate::params::join(path, stringify!($leaf)), &self.$leaf),)*
                    $($child: self.$child.map(&$crate::params::join(path, stringify!($child)), f),)*
                    $($plain: self.$plain.clone(),)*
                }
            }

            fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &W)) {
                $(f(&$crate::params::join(path, stringify!($leaf)), &self.$leaf);)*
                $(self.$child.visit(&$crate::params::join(path, stringify!($child)), f);)*
            }

            fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut W)) {
                $(f(&$crate::params::join(path, stringify!($leaf)), &mut self.$leaf);)*
                $(self.$child.visit_mut(&$crate::params::join(path, stringify!($child)), f);)*
            }
        }
    };
}
pub(crate) use param_tree;

/// Registers every slot of `p` as a named trainable parameter.
pub fn bind<T: Scalar, P: ParamTree<Tensor<T>>>(tape: &mut Tape<T>, p: &P) -> P::Mapped<Var> {
    p.map("", &mut |name, t| tape.param(name, t.clone()))
}

/// Records every slot of `p` as a constant.
pub fn constants<T: Scalar, P: ParamTree<Tensor<T>>>(tape: &mut Tape<T>, p: &P) -> P::Mapped<Var> {
    p.map("", &mut |_, t| tape.constant(t.clone()))
}

pub fn cast<T: Scalar, U: Scalar, P: ParamTree<Tensor<T>>>(p: &P) -> P::Mapped<Tensor<U>> {
    p.map("", &mut |_, t| t.cast::<U>())
}

/// Slot values in tree order.
pub fn slots<T: Scalar, P: ParamTree<Tensor<T>>>(p: &P) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.push(t.clone()));
    out
}

/// Rebuilds the tree from handles given in [`slots`] order.
pub fn rebind<W, P: ParamTree<W>>(p: &P, vars: &[Var]) -> P::Mapped<Var> {
    let mut it = vars.iter();
    p.map("", &mut |_, _| *it.next().expect("one handle per slot"))
}

/// Flattened `name → tensor` view.
pub fn named<T: Scalar, P: ParamTree<Tensor<T>>>(p: &P) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    p.visit("", &mut |name, t| {
        out.insert(name.to_string(), t.clone());
    });
    out
}

pub fn count<T: Scalar, P: ParamTree<Tensor<T>>>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.numel());
    n
}

/// Overwrites every slot from `values`; every slot must be present with
/// matching dims.
pub fn load_named<T: Scalar, P: ParamTree<Tensor<T>>>(p: &mut P, values: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    let mut err = None;
    p.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match values.get(name) {
            Some(v) if v.dims() == t.dims() => *t = v.clone(),
            Some(v) => err = Some(Error::shape("load_named", t.dims(), v.dims())),
            None => err = Some(Error::UnknownParameter(name.to_string())),
        }
    });
    err.map_or(Ok(()), Err)
}

/// One Adam step over every slot that received a gradient; slots the loss
/// does not reach are left untouched.
pub fn adam_step<T: Scalar, P: ParamTree<Tensor<T>>>(adam: &mut Adam<T>, p: &mut P, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    adam.begin_step();
    let mut err = None;
    p.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        if let Some(g) = grads.get(name) {
            if let Err(e) = adam.update(name, t, g) {
                err = Some(e);
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Sums gradient maps in the given order.
pub fn accumulate<T: Scalar>(acc: &mut BTreeMap<String, Tensor<T>>, grads: Gradients<T>) {
    for (name, g) in grads.into_params() {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn normal(rng: &mut impl Rng, dims: Vec<usize>, std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(dims, |_| dist.sample(rng) as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<W = Tensor<f32>> {
    /// `out × in`.
    pub weight: W,
    /// `out`.
    pub bias: W,
}
param_tree!(LinearParams { leaves: [weight, bias], nested: [], plain: [] });

impl LinearParams {
    pub fn init(rng: &mut impl Rng, out: usize, input: usize) -> Self {
        Self {
            weight: normal(rng, vec![out, input], (1.0 / input as f64).sqrt()),
            bias: Tensor::zeros(vec![out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<W = Tensor<f32>> {
    /// `K × C × kh × kw`.
    pub weight: W,
    /// `K`.
    pub bias: W,
    pub footprint: KernelFootprint,
}
param_tree!(ConvParams { leaves: [weight, bias], nested: [], plain: [footprint] });

impl ConvParams {
    /// Square kernel with stride and padding given by `footprint`.
    pub fn init(rng: &mut impl Rng, out: usize, input: usize, footprint: KernelFootprint) -> Self {
        let fan_in = input * footprint.window_size();
        Self {
            weight: normal(
                rng,
                vec![out, input, footprint.kernel_h, footprint.kernel_w],
                (1.0 / fan_in as f64).sqrt(),
            ),
            bias: Tensor::zeros(vec![out]),
            footprint,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<W = Tensor<f32>> {
    pub gamma: W,
    pub beta: W,
}
param_tree!(LayerNormParams { leaves: [gamma, beta], nested: [], plain: [] });

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<W = Tensor<f32>> {
    /// `E × N`; the decay is `A = −exp(a_log)`.
    pub a_log: W,
    /// `E`.
    pub d_skip: W,
    /// `N × E`.
    pub w_b: W,
    /// `N × E`.
    pub w_c: W,
    /// `E × E`.
    pub w_delta: W,
    /// `E`.
    pub delta_bias: W,
}
param_tree!(SsmParams { leaves: [a_log, d_skip, w_b, w_c, w_delta, delta_bias], nested: [], plain: [] });

impl SsmParams {
    /// `A = −(1..=N)` per channel; step sizes start log-uniform in
    /// `[1e-3, 1e-1]`.
    pub fn init(rng: &mut impl Rng, channels: usize, states: usize) -> Self {
        let a_log = Tensor::from_fn(vec![channels, states], |i| (((i % states) + 1) as f32).ln());
        let delta_bias = Tensor::from_fn(vec![channels], |_| {
            let dt = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            // inverse softplus
            (dt + (-(-dt).exp_m1()).ln()) as f32
        });
        let proj_std = (1.0 / channels as f64).sqrt();
        Self {
            a_log,
            d_skip: Tensor::full(vec![channels], 1.0),
            w_b: normal(rng, vec![states, channels], proj_std),
            w_c: normal(rng, vec![states, channels], proj_std),
            w_delta: normal(rng, vec![channels, channels], proj_std * 0.1),
            delta_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<W = Tensor<f32>> {
    pub norm: LayerNormParams<W>,
    /// `2E × D`; rows `0..E` feed the scan, rows `E..2E` the gate.
    pub in_proj: LinearParams<W>,
    pub ssm: SsmParams<W>,
    /// `D × E`.
    pub out_proj: LinearParams<W>,
}
param_tree!(BlockParams { leaves: [], nested: [norm, in_proj, ssm, out_proj], plain: [] });

impl BlockParams {
    pub fn init(rng: &mut impl Rng, dim: usize, expand: usize, states: usize) -> Self {
        let e = dim * expand;
        Self {
            norm: LayerNormParams::init(dim),
            in_proj: LinearParams::init(rng, 2 * e, dim),
            ssm: SsmParams::init(rng, e, states),
            out_proj: LinearParams::init(rng, dim, e),
        }
    }

    /// Same as [`BlockParams::init`] with a zero output projection.
    pub fn init_zero_out(rng: &mut impl Rng, dim: usize, expand: usize, states: usize) -> Self {
        let mut p = Self::init(rng, dim, expand, states);
        p.out_proj.weight = Tensor::zeros(p.out_proj.weight.dims().to_vec());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_dotted_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = vec![BlockParams::init(&mut rng, 4, 2, 3)];
        let names: Vec<String> = named(&p).into_keys().collect();
        assert!(names.contains(&"0.ssm.a_log".to_string()));
        assert!(names.contains(&"0.in_proj.weight".to_string()));
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn init_decay_is_negative_and_steps_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsmParams::init(&mut rng, 6, 4);
        for &b in p.delta_bias.data() {
            let dt = (b as f64).exp().ln_1p();
            assert!((1e-3 * 0.999..=1e-1 * 1.001).contains(&dt), "{dt}");
        }
        assert!(p.a_log.data().iter().all(|v| (-v.exp()) < 0.0));
    }

    #[test]
    fn load_round_trip_and_rejects_missing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = LinearParams::init(&mut rng, 3, 2);
        let mut b = LinearParams::init(&mut rng, 3, 2);
        load_named(&mut b, &named(&a)).unwrap();
        assert_eq!(a, b);
        assert!(load_named(&mut b, &BTreeMap::new()).is_err());
    }

    #[test]
    fn adam_skips_params_without_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = LinearParams::init(&mut rng, 2, 2);
        let before = p.clone();
        let mut grads = BTreeMap::new();
        grads.insert("bias".to_string(), Tensor::full(vec![2], 1.0f32));
        let mut adam = Adam::new(Default::default());
        adam_step(&mut adam, &mut p, &grads).unwrap();
        assert_eq!(p.weight, before.weight);
        assert_ne!(p.bias, before.bias);
    }
}
