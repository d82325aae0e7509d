//! Validity propagation rules for receptive-field, dense and sequence
//! operations.
//!
//! Standard (mask-unaware) layers follow [`ValidityRule::AllValid`]: an
//! output is valid only if every input it reads is valid, which for a
//! sliding window is a morphological erosion. Partial layers follow
//! [`ValidityRule::AnyValid`]: one valid input suffices, a dilation.
//! Zero padding always counts as invalid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ValidityMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValidityRule {
    AllValid,
    AnyValid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanDirection {
    Forward,
    Backward,
    Bidirectional,
}

/// Sliding-window geometry: square stride, symmetric padding, dilation 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelFootprint {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl KernelFootprint {
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel_h,
            kernel_w,
            stride,
            padding,
        }
    }

    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(kernel, kernel, stride, padding)
    }

    /// Stride 1 with padding that keeps the spatial size (odd kernels).
    pub fn same(kernel: usize) -> Self {
        Self::square(kernel, 1, kernel / 2)
    }

    pub fn window_size(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Output `(h, w)` for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::invalid("KernelFootprint", format!("degenerate footprint {self:?}")));
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.kernel_h > ph || self.kernel_w > pw {
            return Err(Error::invalid(
                "KernelFootprint",
                format!("kernel {}x{} larger than padded input {ph}x{pw}", self.kernel_h, self.kernel_w),
            ));
        }
        Ok(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }
}

/// Number of valid inputs under every output window, via a summed-area table.
pub fn window_valid_counts(m: &ValidityMask, fp: &KernelFootprint) -> Result<(usize, usize, Vec<usize>)> {
    let (h, w) = m.hw()?;
    let (oh, ow) = fp.output_hw(h, w)?;
    // sat[(i, j)] = valid count in rows < i, cols < j of the unpadded mask.
    let sw = w + 1;
    let mut sat = vec![0usize; (h + 1) * sw];
    for i in 0..h {
        let mut row = 0;
        for j in 0..w {
            row += m.get(i * w + j) as usize;
            sat[(i + 1) * sw + j + 1] = sat[i * sw + j + 1] + row;
        }
    }
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let mut counts = Vec::with_capacity(oh * ow);
    for oi in 0..oh {
        let r0 = (oi * fp.stride) as isize - fp.padding as isize;
        let (a, b) = (clamp(r0, h), clamp(r0 + fp.kernel_h as isize, h));
        for oj in 0..ow {
            let c0 = (oj * fp.stride) as isize - fp.padding as isize;
            let (c, d) = (clamp(c0, w), clamp(c0 + fp.kernel_w as isize, w));
            counts.push(sat[b * sw + d] + sat[a * sw + c] - sat[a * sw + d] - sat[b * sw + c]);
        }
    }
    Ok((oh, ow, counts))
}

pub fn propagate_receptive_field(
    m: &ValidityMask,
    fp: &KernelFootprint,
    rule: ValidityRule,
) -> Result<ValidityMask> {
    let (oh, ow, counts) = window_valid_counts(m, fp)?;
    let full = fp.window_size();
    let bits = counts
        .into_iter()
        .map(|c| match rule {
            ValidityRule::AllValid => c == full,
            ValidityRule::AnyValid => c > 0,
        })
        .collect();
    ValidityMask::new(vec![oh, ow], bits)
}

/// Validity of a dense (fully-connected) output over all of `m_in`.
pub fn propagate_dense(m_in: &ValidityMask, rule: ValidityRule) -> bool {
    let valid = m_in.count_valid();
    match rule {
        ValidityRule::AllValid => valid == m_in.len(),
        ValidityRule::AnyValid => valid > 0,
    }
}

/// The history of position `t` is every position a scan in `direction`
/// visits up to and including `t`; bidirectional history is the whole
/// sequence.
pub fn propagate_sequence(
    m_token: &ValidityMask,
    direction: ScanDirection,
    rule: ValidityRule,
) -> Result<ValidityMask> {
    let bits = m_token.bits();
    if bits.is_empty() {
        return Err(Error::Empty { op: "propagate_sequence" });
    }
    let fold = |acc: bool, b: bool| match rule {
        ValidityRule::AllValid => acc && b,
        ValidityRule::AnyValid => acc || b,
    };
    let init = matches!(rule, ValidityRule::AllValid);
    let prefix = |iter: &mut dyn Iterator<Item = &bool>| {
        let mut acc = init;
        iter.map(|&b| {
            acc = fold(acc, b);
            acc
        })
        .collect::<Vec<_>>()
    };
    let out = match direction {
        ScanDirection::Forward => prefix(&mut bits.iter()),
        ScanDirection::Backward => {
            let mut v = prefix(&mut bits.iter().rev());
            v.reverse();
            v
        }
        ScanDirection::Bidirectional => {
            let whole = bits.iter().fold(init, |acc, &b| fold(acc, b));
            vec![whole; bits.len()]
        }
    };
    ValidityMask::new(m_token.dims().to_vec(), out)
}

/// Reference implementation: enumerates every input under every window.
pub fn oracle_receptive_field(
    m: &ValidityMask,
    fp: &KernelFootprint,
    rule: ValidityRule,
) -> Result<ValidityMask> {
    let (h, w) = m.hw()?;
    let (oh, ow) = fp.output_hw(h, w)?;
    let mut bits = Vec::with_capacity(oh * ow);
    for oi in 0..oh {
        for oj in 0..ow {
            let mut any = false;
            let mut all = true;
            for ki in 0..fp.kernel_h {
                for kj in 0..fp.kernel_w {
                    let i = (oi * fp.stride + ki) as isize - fp.padding as isize;
                    let j = (oj * fp.stride + kj) as isize - fp.padding as isize;
                    let inside = i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w;
                    let valid = inside && m.get(i as usize * w + j as usize);
                    any |= valid;
                    all &= valid;
                }
            }
            bits.push(match rule {
                ValidityRule::AllValid => all,
                ValidityRule::AnyValid => any,
            });
        }
    }
    ValidityMask::new(vec![oh, ow], bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> ValidityMask {
        ValidityMask::from_u8(vec![h, w], bits).unwrap()
    }

    fn center_hole() -> ValidityMask {
        mask(3, 3, &[1, 1, 1, 1, 0, 1, 1, 1, 1])
    }

    #[test]
    fn center_hole_erodes_everything() {
        let fp = KernelFootprint::same(3);
        let out = propagate_receptive_field(&center_hole(), &fp, ValidityRule::AllValid).unwrap();
        assert_eq!(out.count_valid(), 0);
        assert_eq!(out, oracle_receptive_field(&center_hole(), &fp, ValidityRule::AllValid).unwrap());
    }

    #[test]
    fn center_hole_dilates_to_full() {
        let fp = KernelFootprint::same(3);
        let out = propagate_receptive_field(&center_hole(), &fp, ValidityRule::AnyValid).unwrap();
        assert!(out.all_valid());
        assert_eq!(out, oracle_receptive_field(&center_hole(), &fp, ValidityRule::AnyValid).unwrap());
    }

    #[test]
    fn full_mask_without_padding_stays_valid() {
        let m = ValidityMask::ones(vec![5, 5]);
        let fp = KernelFootprint::square(3, 1, 0);
        for rule in [ValidityRule::AllValid, ValidityRule::AnyValid] {
            let out = propagate_receptive_field(&m, &fp, rule).unwrap();
            assert_eq!(out.dims(), &[3, 3]);
            assert!(out.all_valid());
        }
    }

    #[test]
    fn unit_kernel_subsamples() {
        let m = mask(3, 3, &[1, 0, 1, 0, 1, 0, 1, 1, 0]);
        let fp = KernelFootprint::square(1, 2, 0);
        for rule in [ValidityRule::AllValid, ValidityRule::AnyValid] {
            let out = propagate_receptive_field(&m, &fp, rule).unwrap();
            assert_eq!(out.to_u8(), vec![1, 1, 1, 0]);
        }
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let m = ValidityMask::ones(vec![2, 2]);
        assert!(propagate_receptive_field(&m, &KernelFootprint::square(5, 1, 0), ValidityRule::AnyValid).is_err());
        assert!(oracle_receptive_field(&m, &KernelFootprint::square(5, 1, 0), ValidityRule::AnyValid).is_err());
    }

    #[test]
    fn dense_rules() {
        let m = ValidityMask::from_u8(vec![3], &[1, 1, 0]).unwrap();
        assert!(!propagate_dense(&m, ValidityRule::AllValid));
        assert!(propagate_dense(&m, ValidityRule::AnyValid));
        let zeros = ValidityMask::zeros(vec![4]);
        assert!(!propagate_dense(&zeros, ValidityRule::AllValid));
        assert!(!propagate_dense(&zeros, ValidityRule::AnyValid));
        let ones = ValidityMask::ones(vec![4]);
        assert!(propagate_dense(&ones, ValidityRule::AllValid));
        assert!(propagate_dense(&ones, ValidityRule::AnyValid));
    }

    #[test]
    fn sequence_rules() {
        let seq = |b: &[u8]| ValidityMask::from_u8(vec![b.len()], b).unwrap();
        let fwd = propagate_sequence(&seq(&[1, 0, 1]), ScanDirection::Forward, ValidityRule::AllValid).unwrap();
        assert_eq!(fwd.to_u8(), vec![1, 0, 0]);
        let any = propagate_sequence(&seq(&[0, 0, 1]), ScanDirection::Forward, ValidityRule::AnyValid).unwrap();
        assert_eq!(any.to_u8(), vec![0, 0, 1]);
        let bwd = propagate_sequence(&seq(&[0, 0, 1]), ScanDirection::Backward, ValidityRule::AnyValid).unwrap();
        assert_eq!(bwd.to_u8(), vec![1, 1, 1]);
        let bi = propagate_sequence(&seq(&[1, 1, 0, 1]), ScanDirection::Bidirectional, ValidityRule::AllValid)
            .unwrap();
        assert_eq!(bi.count_valid(), 0);
    }

    fn arb_case() -> impl Strategy<Value = (ValidityMask, KernelFootprint, ValidityRule)> {
        (1usize..=16, 1usize..=16, prop::sample::select(vec![1usize, 3, 5]), 1usize..=2, 0usize..=2, any::<bool>())
            .prop_filter("kernel fits", |(h, w, k, _, p, _)| *k <= h + 2 * p && *k <= w + 2 * p)
            .prop_flat_map(|(h, w, k, s, p, all)| {
                prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| {
                    (
                        ValidityMask::new(vec![h, w], bits).unwrap(),
                        KernelFootprint::square(k, s, p),
                        if all { ValidityRule::AllValid } else { ValidityRule::AnyValid },
                    )
                })
            })
    }

    proptest! {
        #[test]
        fn matches_oracle((m, fp, rule) in arb_case()) {
            prop_assert_eq!(
                propagate_receptive_field(&m, &fp, rule).unwrap(),
                oracle_receptive_field(&m, &fp, rule).unwrap()
            );
        }

        #[test]
        fn monotone_in_valid_pixels((m, fp, rule) in arb_case(), flip in any::<prop::sample::Index>()) {
            let mut more = m.clone();
            let i = flip.index(more.len());
            more.bits_mut()[i] = true;
            let before = propagate_receptive_field(&m, &fp, rule).unwrap();
            let after = propagate_receptive_field(&more, &fp, rule).unwrap();
            for (b, a) in before.bits().iter().zip(after.bits()) {
                prop_assert!(!b || *a);
            }
        }

        #[test]
        fn erosion_dilation_duality((m, fp, _) in arb_case()) {
            let fp = KernelFootprint::square(fp.kernel_h, 1, 0);
            prop_assume!(fp.output_hw(m.dims()[0], m.dims()[1]).is_ok());
            let eroded = propagate_receptive_field(&m, &fp, ValidityRule::AllValid).unwrap();
            let dilated = propagate_receptive_field(&m.complement(), &fp, ValidityRule::AnyValid).unwrap();
            prop_assert_eq!(eroded, dilated.complement());
        }

        #[test]
        fn sequence_rules_are_idempotent(bits in prop::collection::vec(any::<bool>(), 1..40), dir in 0usize..3, all in any::<bool>()) {
            let m = ValidityMask::new(vec![bits.len()], bits).unwrap();
            let dir = [ScanDirection::Forward, ScanDirection::Backward, ScanDirection::Bidirectional][dir];
            let rule = if all { ValidityRule::AllValid } else { ValidityRule::AnyValid };
            let once = propagate_sequence(&m, dir, rule).unwrap();
            let twice = propagate_sequence(&once, dir, rule).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
