use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, ValidityMask};

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Mean of `sqrt((pred − gt)² + eps²)` over positions with `m_gt` set.
pub fn charbonnier_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, m_gt: &ValidityMask, eps: T) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = tape.charbonnier(p, gt, m_gt, eps)?;
    Ok(tape.value(l).data()[0])
}

/// `(rmse, mae)` over positions with `m` set, accumulated in f64.
pub fn rmse_mae_valid<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, m: &ValidityMask) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() || !pred.numel().is_multiple_of(m.len()) {
        return Err(Error::shape("rmse_mae_valid", pred.dims(), gt.dims()));
    }
    let plane = m.len();
    let (mut sq, mut ab, mut n) = (0.0, 0.0, 0usize);
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if m.get(i % plane) {
            let d = p.as_f64() - g.as_f64();
            sq += d * d;
            ab += d.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidData { op: "rmse_mae_valid" });
    }
    Ok(((sq / n as f64).sqrt(), ab / n as f64))
}

/// Fraction of rows whose label is among the `k` largest logits; ties go to
/// the lower class index.
pub fn topk_accuracy<T: Scalar>(logits: &[Tensor<T>], labels: &[usize], k: usize) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::invalid("topk_accuracy", format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    if logits.is_empty() {
        return Err(Error::Empty { op: "topk_accuracy" });
    }
    let mut hits = 0;
    for (z, &label) in logits.iter().zip(labels) {
        let z = z.data();
        if label >= z.len() {
            return Err(Error::LabelOutOfRange { label, classes: z.len() });
        }
        if k == 0 || k > z.len() {
            return Err(Error::invalid("topk_accuracy", format!("k = {k} with {} classes", z.len())));
        }
        // Classes ranked ahead of `label`: strictly larger, or equal with a lower index.
        let ahead = z
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v > z[label] || (v == z[label] && i < label))
            .count();
        hits += usize::from(ahead < k);
    }
    Ok(hits as f64 / labels.len() as f64)
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<T> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = tape.cross_entropy(z, label)?;
    Ok(tape.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn charbonnier_examples() {
        let m = ValidityMask::ones(vec![3]);
        let a = t(&[1.0, 2.0, 3.0]);
        assert!((charbonnier_loss(&a, &a, &m, 1e-3).unwrap() - 1e-3).abs() < 1e-15);
        let one = ValidityMask::from_u8(vec![3], &[0, 1, 0]).unwrap();
        let b = t(&[50.0, 5.0, -9.0]);
        let l = charbonnier_loss(&b, &a, &one, 1e-3).unwrap();
        assert!((l - (9.0f64 + 1e-6).sqrt()).abs() < 1e-12);
        assert!((l - 3.000_000_17).abs() < 1e-8);
        assert!(charbonnier_loss(&a, &a, &ValidityMask::zeros(vec![3]), 1e-3).is_err());
    }

    #[test]
    fn rmse_mae_examples() {
        let (r, m) = rmse_mae_valid(&t(&[1.0, 2.0]), &t(&[1.0, 4.0]), &ValidityMask::ones(vec![2])).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        assert!((m - 1.0).abs() < 1e-12);
        let sel = ValidityMask::from_u8(vec![2], &[1, 0]).unwrap();
        assert_eq!(rmse_mae_valid(&t(&[1.0, 2.0]), &t(&[1.0, 4.0]), &sel).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn topk_examples() {
        let z = t(&[0.1, 0.9, 0.5]);
        assert_eq!(topk_accuracy(std::slice::from_ref(&z), &[2], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(std::slice::from_ref(&z), &[2], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(std::slice::from_ref(&z), &[0], 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&[t(&[1.0, 1.0])], &[0, ][..], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&[t(&[1.0, 1.0])], &[1], 1).unwrap(), 0.0);
        assert!(topk_accuracy(&[z], &[3], 1).is_err());
    }

    #[test]
    fn cross_entropy_limits() {
        assert!((cross_entropy(&Tensor::<f64>::zeros(vec![10]), 3).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(cross_entropy(&t(&[50.0, 0.0, 0.0]), 0).unwrap() < 1e-20);
    }
}
