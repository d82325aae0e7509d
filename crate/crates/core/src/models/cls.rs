//! Image classifier: patch stem, residual blocks, pooling, linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Variant;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{KernelFootprint, ScanDirection};
use crate::params::{constants, param_tree, ConvParams, LinearParams};
use crate::partial::{partial_global_pool_t, pconv2d_t, std_conv2d_masked_t, MaskedVar, TokenVar};
use crate::pvm::{pvm_residual_t, vm_residual_t, PvmOptions, PvmParams, SubstituteOrder, TokenPadding};
use crate::tensor::{MaskedTensor, Scalar, Tensor, ValidityMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub expand: usize,
    pub states: usize,
    pub blocks: usize,
    pub classes: usize,
    pub variant: Variant,
    pub token_padding: TokenPadding,
    pub scan: ScanDirection,
    pub substitute: SubstituteOrder,
}

impl Default for ClsConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch: 4,
            dim: 64,
            expand: 2,
            states: 8,
            blocks: 2,
            classes: 10,
            variant: Variant::Pvm,
            token_padding: TokenPadding::Learned,
            scan: ScanDirection::Bidirectional,
            substitute: SubstituteOrder::BeforeNorm,
        }
    }
}

impl ClsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.image_size, self.channels, self.patch, self.dim, self.expand, self.states, self.classes];
        if positive.contains(&0) {
            return Err(Error::invalid("ClsConfig", "sizes must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::invalid("ClsConfig", format!("image size {} not divisible by patch {}", self.image_size, self.patch)));
        }
        Ok(())
    }

    /// Options of the blocks, which run on the stem's token grid.
    pub fn block_options(&self) -> PvmOptions {
        PvmOptions {
            patch: 1,
            padding: self.token_padding,
            direction: self.scan,
            order: self.substitute,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsParams<W = Tensor<f32>> {
    /// `D × C × P × P`, stride `P`.
    pub stem: ConvParams<W>,
    pub blocks: Vec<PvmParams<W>>,
    /// `classes × D`.
    pub head: LinearParams<W>,
}
param_tree!(ClsParams { leaves: [], nested: [stem, blocks, head], plain: [] });

impl ClsParams {
    pub fn init(rng: &mut impl Rng, cfg: &ClsConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            stem: ConvParams::init(rng, cfg.dim, cfg.channels, KernelFootprint::square(cfg.patch, cfg.patch, 0)),
            blocks: (0..cfg.blocks)
                .map(|_| PvmParams::init(rng, cfg.dim, 1, cfg.dim, cfg.expand, cfg.states))
                .collect(),
            head: LinearParams::init(rng, cfg.classes, cfg.dim),
        })
    }
}

/// Feature map `D × h × w` to tokens `L × D`.
fn to_tokens<T: Scalar>(tape: &mut Tape<T>, f: &MaskedVar) -> Result<TokenVar> {
    let dims = tape.dims(f.value).to_vec();
    let l = dims[1] * dims[2];
    let flat = tape.reshape(f.value, &[dims[0], l])?;
    let tokens = tape.transpose(flat)?;
    Ok(TokenVar {
        tokens,
        token_mask: f.mask.clone().reshape(vec![l])?,
    })
}

/// Logits for one image.
pub fn cls_forward_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, p: &ClsParams<Var>, cfg: &ClsConfig) -> Result<Var> {
    let opts = cfg.block_options();
    let pooled = match cfg.variant {
        Variant::Pvm => {
            if !x.mask.any_valid() {
                return Err(Error::NoValidData { op: "cls_forward" });
            }
            let mut h = pconv2d_t(tape, x, &p.stem)?;
            for b in &p.blocks {
                h = pvm_residual_t(tape, &h, b, &opts)?;
            }
            let t = to_tokens(tape, &h)?;
            partial_global_pool_t(tape, &t)?.0
        }
        Variant::Vm => {
            let mut h = std_conv2d_masked_t(tape, x, &p.stem)?;
            for b in &p.blocks {
                h = vm_residual_t(tape, &h, b, &opts)?;
            }
            let mut t = to_tokens(tape, &h)?;
            t.token_mask = ValidityMask::ones(t.token_mask.dims().to_vec());
            tape.masked_mean_rows(t.tokens, &t.token_mask)?
        }
    };
    tape.linear(pooled, p.head.weight, p.head.bias)
}

pub fn cls_forward<T: Scalar>(x: &MaskedTensor<T>, cfg: &ClsConfig, p: &ClsParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = MaskedVar::constant(&mut tape, x);
    let pv = constants(&mut tape, p);
    let y = cls_forward_t(&mut tape, &xv, &pv, cfg)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::params::{cast, rebind, slots};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ClsConfig {
        ClsConfig {
            image_size: 8,
            patch: 4,
            dim: 4,
            expand: 1,
            states: 2,
            blocks: 1,
            classes: 3,
            ..ClsConfig::default()
        }
    }

    fn input(rng: &mut ChaCha8Rng, cfg: &ClsConfig, p_valid: f64) -> MaskedTensor<f32> {
        let s = cfg.image_size;
        let mut bits: Vec<bool> = (0..s * s).map(|_| rng.gen_bool(p_valid)).collect();
        bits[0] = true;
        let v = Tensor::from_fn(vec![cfg.channels, s, s], |_| rng.gen_range(-1.0..1.0));
        MaskedTensor::new(v, ValidityMask::new(vec![s, s], bits).unwrap()).unwrap()
    }

    #[test]
    fn variants_agree_on_fully_valid_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = tiny();
        let p = ClsParams::init(&mut rng, &cfg).unwrap();
        let x = MaskedTensor::fully_valid(input(&mut rng, &cfg, 1.0).values().clone()).unwrap();
        let a = cls_forward(&x, &cfg, &p).unwrap();
        let b = cls_forward(&x, &ClsConfig { variant: Variant::Vm, ..cfg.clone() }, &p).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.dims(), &[3]);
    }

    #[test]
    fn pvm_logits_ignore_placeholders() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny();
        let p = ClsParams::init(&mut rng, &cfg).unwrap();
        for _ in 0..10 {
            let x = input(&mut rng, &cfg, 0.5);
            let noisy = x.with_placeholders(|| rng.gen_range(-9.0..9.0));
            assert!(cls_forward(&x, &cfg, &p).unwrap().bit_eq(&cls_forward(&noisy, &cfg, &p).unwrap()));
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny();
        let p: ClsParams<Tensor<f64>> = cast(&ClsParams::init(&mut rng, &cfg).unwrap());
        let x = input(&mut rng, &cfg, 0.6);
        let mask = x.mask().clone();
        let mut inputs = vec![x.values().cast::<f64>()];
        inputs.extend(slots(&p));
        let r = grad_check(&inputs, 1e-6, |t, v| {
            let pv = rebind(&p, &v[1..]);
            let xv = MaskedVar { value: v[0], mask: mask.clone() };
            let z = cls_forward_t(t, &xv, &pv, &cfg)?;
            t.cross_entropy(z, 1)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
