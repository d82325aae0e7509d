//! Smooth synthetic depth maps and their sparse samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::masks::{gen_mask, MaskPolicy};
use super::{stream_rng, Stream};
use crate::error::Result;
use crate::tensor::{MaskedTensor, Tensor};

pub const DEPTH_RANGE: (f32, f32) = (1.0, 80.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthFieldSpec {
    pub size: usize,
    pub count: usize,
    /// Fraction of pixels kept in the sparse input.
    pub density: f64,
    pub seed: u64,
}

impl Default for DepthFieldSpec {
    fn default() -> Self {
        Self {
            size: 64,
            count: 1000,
            density: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    /// Dense `1 × H × W` ground truth.
    pub gt: Tensor<f32>,
    /// `gt` at the sampled pixels, zero elsewhere.
    pub input: MaskedTensor<f32>,
}

/// Sample `index` of the dataset described by `spec`.
pub fn gen_depth_field(spec: &DepthFieldSpec, index: u64) -> Result<DepthSample> {
    let s = spec.size;
    let mut rng = stream_rng(spec.seed, Stream::Depth, index);
    let sf = s as f64;
    let base = rng.gen_range(8.0..50.0);
    let (gy, gx) = (rng.gen_range(-25.0..25.0) / sf, rng.gen_range(-10.0..10.0) / sf);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(3..=6))
        .map(|_| {
            (
                rng.gen_range(0.0..sf),
                rng.gen_range(0.0..sf),
                rng.gen_range(0.06..0.25) * sf,
                rng.gen_range(-20.0..25.0),
            )
        })
        .collect();
    let gt = Tensor::from_fn(vec![1, s, s], |i| {
        let (y, x) = ((i / s) as f64, (i % s) as f64);
        let mut d = base + gy * (y - sf / 2.0) + gx * (x - sf / 2.0);
        for &(cy, cx, sigma, amp) in &bumps {
            let r2 = (y - cy).powi(2) + (x - cx).powi(2);
            d += amp * (-r2 / (2.0 * sigma * sigma)).exp();
        }
        (d as f32).clamp(DEPTH_RANGE.0, DEPTH_RANGE.1)
    });
    let mask = gen_mask(&MaskPolicy::SparseSample { density: spec.density }, s, s, &mut rng)?;
    let input = MaskedTensor::new(gt.clone(), mask)?;
    Ok(DepthSample { gt, input })
}

pub fn gen_depth_fields(spec: &DepthFieldSpec) -> Result<Vec<DepthSample>> {
    (0..spec.count as u64).map(|i| gen_depth_field(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> DepthFieldSpec {
        DepthFieldSpec {
            size: 32,
            count: 8,
            density: 0.05,
            seed,
        }
    }

    #[test]
    fn depths_stay_in_range() {
        for s in gen_depth_fields(&spec(1)).unwrap() {
            assert!(s.gt.data().iter().all(|&d| (DEPTH_RANGE.0..=DEPTH_RANGE.1).contains(&d)));
        }
    }

    #[test]
    fn sparse_input_matches_gt_on_valid_and_is_zero_elsewhere() {
        for s in gen_depth_fields(&spec(2)).unwrap() {
            assert!(s.input.mask().any_valid());
            for (i, &v) in s.input.values().data().iter().enumerate() {
                let expect = if s.input.mask().get(i) { s.gt.data()[i] } else { 0.0 };
                assert_eq!(v, expect);
            }
        }
    }

    #[test]
    fn different_seeds_give_different_fields() {
        let a = gen_depth_field(&spec(3), 0).unwrap();
        let b = gen_depth_field(&spec(4), 0).unwrap();
        let differ = a.gt.data().iter().zip(b.gt.data()).filter(|(x, y)| x != y).count();
        assert!(differ * 2 > a.gt.numel(), "{differ}");
    }

    #[test]
    fn regeneration_is_bit_identical() {
        assert_eq!(gen_depth_fields(&spec(5)).unwrap(), gen_depth_fields(&spec(5)).unwrap());
    }
}
