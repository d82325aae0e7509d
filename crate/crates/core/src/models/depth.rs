//! Depth completion from sparse samples.
//!
//! ```text
//! x ─ SFE (conv) ─┬─ RPSSB × n ─ concat ─ fill until valid ─ conv ─ silu ─ conv ─ × depth_scale
//!                 └──────────────┘
//! RPSSB: h ─ PVM residual × k ─ conv ─ (+ h), input mask retained
//! ```
//!
//! The `vm` variant swaps every partial operator for its standard
//! counterpart and skips the filling stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Variant;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{KernelFootprint, ScanDirection};
use crate::params::{constants, param_tree, ConvParams, LinearParams};
use crate::partial::{fill_until_valid_t, pconv2d_t, std_conv2d_masked_t, MaskedVar};
use crate::pvm::{pvm_residual_t, vm_residual_t, PvmOptions, PvmParams, SubstituteOrder, TokenPadding};
use crate::tensor::{MaskedTensor, Scalar, Tensor, ValidityMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Feature channels of the convolutional trunk.
    pub features: usize,
    pub patch: usize,
    pub dim: usize,
    pub expand: usize,
    pub states: usize,
    pub rpssb_blocks: usize,
    pub pvmm_per_block: usize,
    pub fill_kernel: usize,
    pub max_fill_iters: usize,
    /// Inputs are divided by this and predictions multiplied by it.
    pub depth_scale: f64,
    pub variant: Variant,
    pub token_padding: TokenPadding,
    pub scan: ScanDirection,
    pub substitute: SubstituteOrder,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            features: 8,
            patch: 4,
            dim: 64,
            expand: 2,
            states: 8,
            rpssb_blocks: 6,
            pvmm_per_block: 2,
            fill_kernel: 3,
            max_fill_iters: 64,
            depth_scale: 40.0,
            variant: Variant::Pvm,
            token_padding: TokenPadding::Learned,
            scan: ScanDirection::Bidirectional,
            substitute: SubstituteOrder::BeforeNorm,
        }
    }
}

impl DepthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.features,
            self.patch,
            self.dim,
            self.expand,
            self.states,
            self.rpssb_blocks,
            self.pvmm_per_block,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid("DepthConfig", "sizes and block counts must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::invalid("DepthConfig", format!("image size {} not divisible by patch {}", self.image_size, self.patch)));
        }
        if self.fill_kernel.is_multiple_of(2) {
            return Err(Error::invalid("DepthConfig", "fill kernel must be odd"));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::invalid("DepthConfig", "depth_scale must be positive"));
        }
        Ok(())
    }

    pub fn block_options(&self) -> PvmOptions {
        PvmOptions {
            patch: self.patch,
            padding: self.token_padding,
            direction: self.scan,
            order: self.substitute,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpssbParams<W = Tensor<f32>> {
    pub pvmm: Vec<PvmParams<W>>,
    pub conv: ConvParams<W>,
}
param_tree!(RpssbParams { leaves: [], nested: [pvmm, conv], plain: [] });

#[derive(Clone, Debug, PartialEq)]
pub struct DepthParams<W = Tensor<f32>> {
    pub sfe: ConvParams<W>,
    pub dfe: Vec<RpssbParams<W>>,
    pub fill: ConvParams<W>,
    pub head1: ConvParams<W>,
    pub head2: ConvParams<W>,
}
param_tree!(DepthParams { leaves: [], nested: [sfe, dfe, fill, head1, head2], plain: [] });

impl DepthParams {
    pub fn init(rng: &mut impl Rng, cfg: &DepthConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.features;
        let same3 = KernelFootprint::same(3);
        let dfe = (0..cfg.rpssb_blocks)
            .map(|_| RpssbParams {
                pvmm: (0..cfg.pvmm_per_block)
                    .map(|_| {
                        let mut p = PvmParams::init(rng, f, cfg.patch, cfg.dim, cfg.expand, cfg.states);
                        // Start each residual branch near identity.
                        p.recon = LinearParams {
                            weight: p.recon.weight.map(|v| v * 0.1),
                            bias: p.recon.bias,
                        };
                        p
                    })
                    .collect(),
                conv: ConvParams::init(rng, f, f, same3),
            })
            .collect();
        Ok(Self {
            sfe: ConvParams::init(rng, f, cfg.channels, same3),
            dfe,
            fill: averaging_fill(rng, 2 * f, cfg.fill_kernel),
            head1: ConvParams::init(rng, f, 2 * f, same3),
            head2: ConvParams::init(rng, 1, f, same3),
        })
    }
}

/// Per-channel window mean plus small noise, so that at initialization each
/// fill pass spreads valid features into holes without changing their scale.
fn averaging_fill(rng: &mut impl Rng, channels: usize, kernel: usize) -> ConvParams {
    let mut p = ConvParams::init(rng, channels, channels, KernelFootprint::same(kernel));
    let k2 = kernel * kernel;
    for (i, w) in p.weight.data_mut().iter_mut().enumerate() {
        let (o, c) = (i / (channels * k2), (i / k2) % channels);
        *w = 0.01 * *w + if o == c { 1.0 / k2 as f32 } else { 0.0 };
    }
    p
}

/// Prediction in depth units plus mask bookkeeping.
#[derive(Clone, Debug)]
pub struct DcOutput {
    /// `1 × H × W`.
    pub pred: Var,
    pub mask: ValidityMask,
    pub fill_iters: usize,
    /// Mask entering and leaving the deep feature extractor.
    pub dfe_mask_in: ValidityMask,
    pub dfe_mask_out: ValidityMask,
}

/// `x` holds raw depths; the model divides them by `depth_scale`.
pub fn dc_forward_t<T: Scalar>(tape: &mut Tape<T>, x: &MaskedVar, p: &DepthParams<Var>, cfg: &DepthConfig) -> Result<DcOutput> {
    let opts = cfg.block_options();
    let pvm = cfg.variant == Variant::Pvm;
    if pvm && !x.mask.any_valid() {
        return Err(Error::NoValidData { op: "dc_forward" });
    }
    let inv = T::from_f64_lossy(1.0 / cfg.depth_scale);
    let scaled = MaskedVar {
        value: tape.scale(x.value, inv),
        mask: x.mask.clone(),
    };
    let conv = |tape: &mut Tape<T>, h: &MaskedVar, c: &ConvParams<Var>| {
        if pvm {
            pconv2d_t(tape, h, c)
        } else {
            std_conv2d_masked_t(tape, h, c)
        }
    };
    let shallow = conv(tape, &scaled, &p.sfe)?;
    let mut h = shallow.clone();
    for block in &p.dfe {
        let mut inner = h.clone();
        for q in &block.pvmm {
            inner = if pvm {
                pvm_residual_t(tape, &inner, q, &opts)?
            } else {
                vm_residual_t(tape, &inner, q, &opts)?
            };
        }
        let c = conv(tape, &inner, &block.conv)?;
        let sum = tape.add(h.value, c.value)?;
        h = if pvm {
            MaskedVar {
                value: tape.mask_positions(sum, &h.mask)?,
                mask: h.mask,
            }
        } else {
            MaskedVar {
                value: sum,
                mask: h.mask.and(&c.mask)?,
            }
        };
    }
    let dfe_mask_out = h.mask.clone();
    let cat = MaskedVar {
        value: tape.concat0(&[shallow.value, h.value])?,
        mask: shallow.mask.and(&h.mask)?,
    };
    let (dense, fill_iters) = if pvm {
        fill_until_valid_t(tape, &cat, &p.fill, cfg.max_fill_iters)?
    } else {
        (cat, 0)
    };
    let h1 = std_conv2d_masked_t(tape, &dense, &p.head1)?;
    let act = MaskedVar {
        value: tape.silu(h1.value),
        mask: h1.mask,
    };
    let out = std_conv2d_masked_t(tape, &act, &p.head2)?;
    let pred = tape.scale(out.value, T::from_f64_lossy(cfg.depth_scale));
    let mask = if pvm { ValidityMask::ones(x.mask.dims().to_vec()) } else { out.mask };
    Ok(DcOutput {
        pred,
        mask,
        fill_iters,
        dfe_mask_in: shallow.mask,
        dfe_mask_out,
    })
}

/// Dense `1 × H × W` prediction with its mask.
pub fn dc_forward<T: Scalar>(x: &MaskedTensor<T>, cfg: &DepthConfig, p: &DepthParams<Tensor<T>>) -> Result<(MaskedTensor<T>, usize)> {
    let mut tape = Tape::new();
    let xv = MaskedVar::constant(&mut tape, x);
    let pv = constants(&mut tape, p);
    let out = dc_forward_t(&mut tape, &xv, &pv, cfg)?;
    let y = MaskedTensor::new_raw(tape.value(out.pred).clone(), out.mask)?;
    Ok((y, out.fill_iters))
}
