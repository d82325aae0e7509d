//! Grayscale shape-classification images.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 10] = [
    "circle", "square", "triangle", "cross", "ring", "bar-h", "bar-v", "checker", "diamond", "dot-grid",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesSpec {
    pub size: usize,
    pub count: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            size: 32,
            count: 5000,
            classes: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsSample {
    /// `1 × S × S`.
    pub image: Tensor<f32>,
    pub label: usize,
}

/// Whether normalized point `(u, v)` lies inside template `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => u * u + v * v <= 1.0,
        1 => au.max(av) <= 0.8,
        2 => (-0.8..=0.8).contains(&v) && au <= (v + 0.8) * 0.6,
        3 => (au <= 0.25 && av <= 1.0) || (av <= 0.25 && au <= 1.0),
        4 => (0.36..=1.0).contains(&(u * u + v * v)),
        5 => av <= 0.3 && au <= 1.0,
        6 => au <= 0.3 && av <= 1.0,
        7 => au.max(av) <= 1.0 && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        8 => au + av <= 1.0,
        _ => {
            let near = |t: f64| [-0.7, 0.0, 0.7].iter().map(|c| (t - c).abs()).fold(f64::MAX, f64::min);
            let (du, dv) = (near(u), near(v));
            du * du + dv * dv <= 0.06
        }
    }
}

/// Renders `class` at centre `(cy, cx)` with radius `r` onto an
/// `s × s` canvas: `bg` outside, `bg + contrast` inside.
pub fn render_shape(class: usize, s: usize, cy: f64, cx: f64, r: f64, bg: f32, contrast: f32) -> Tensor<f32> {
    Tensor::from_fn(vec![1, s, s], |i| {
        let (y, x) = ((i / s) as f64 + 0.5, (i % s) as f64 + 0.5);
        if inside(class, (x - cx) / r, (y - cy) / r) {
            bg + contrast
        } else {
            bg
        }
    })
}

/// `count` images with labels cycling through `0..classes`.
pub fn gen_shapes_dataset(spec: &ShapesSpec) -> Result<Vec<ClsSample>> {
    if spec.classes == 0 || spec.classes > SHAPE_NAMES.len() {
        return Err(Error::invalid("gen_shapes_dataset", format!("{} classes, {} templates", spec.classes, SHAPE_NAMES.len())));
    }
    if spec.size < 4 {
        return Err(Error::invalid("gen_shapes_dataset", format!("image size {} too small", spec.size)));
    }
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let s = spec.size as f64;
    Ok((0..spec.count)
        .map(|i| {
            let mut rng = stream_rng(spec.seed, Stream::Shapes, i as u64);
            let label = i % spec.classes;
            let r = rng.gen_range(0.25..0.4) * s;
            let cy = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
            let cx = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
            let bg = rng.gen_range(-0.1f32..0.1);
            let contrast = rng.gen_range(0.5f32..1.0);
            let mut image = render_shape(label, spec.size, cy, cx, r, bg, contrast);
            for v in image.data_mut() {
                *v += noise.sample(&mut rng) as f32;
            }
            ClsSample { image, label }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize, seed: u64) -> ShapesSpec {
        ShapesSpec {
            size: 32,
            count,
            classes: 10,
            seed,
        }
    }

    #[test]
    fn classes_are_exactly_balanced() {
        let d = gen_shapes_dataset(&spec(200, 0)).unwrap();
        let mut counts = [0usize; 10];
        for s in &d {
            counts[s.label] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20));
    }

    #[test]
    fn same_seed_gives_identical_dataset() {
        assert_eq!(gen_shapes_dataset(&spec(30, 4)).unwrap(), gen_shapes_dataset(&spec(30, 4)).unwrap());
        assert_ne!(gen_shapes_dataset(&spec(30, 4)).unwrap(), gen_shapes_dataset(&spec(30, 5)).unwrap());
    }

    #[test]
    fn templates_render_distinct_silhouettes() {
        let renders: Vec<Tensor<f32>> = (0..10).map(|c| render_shape(c, 32, 16.0, 16.0, 11.0, 0.0, 1.0)).collect();
        for a in 0..10 {
            assert!(renders[a].data().iter().any(|&v| v > 0.5), "{}", SHAPE_NAMES[a]);
            for b in a + 1..10 {
                assert!(!renders[a].bit_eq(&renders[b]), "{} vs {}", SHAPE_NAMES[a], SHAPE_NAMES[b]);
            }
        }
    }

    #[test]
    fn too_many_classes_is_an_error() {
        assert!(gen_shapes_dataset(&ShapesSpec { classes: 11, ..spec(10, 0) }).is_err());
    }

    /// Nearest class mean is a linear classifier on raw pixels.
    #[test]
    fn clean_linear_probe_beats_chance() {
        let train = gen_shapes_dataset(&spec(1000, 10)).unwrap();
        let test = gen_shapes_dataset(&spec(300, 11)).unwrap();
        let n = 32 * 32;
        let mut means = vec![vec![0.0f64; n]; 10];
        for s in &train {
            for (m, &v) in means[s.label].iter_mut().zip(s.image.data()) {
                *m += v as f64 / 100.0;
            }
        }
        let correct = test
            .iter()
            .filter(|s| {
                let centered: Vec<f64> = {
                    let mu = s.image.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    s.image.data().iter().map(|&v| v as f64 - mu).collect()
                };
                let score = |m: &Vec<f64>| {
                    let mu = m.iter().sum::<f64>() / n as f64;
                    m.iter().zip(&centered).map(|(a, b)| (a - mu) * b).sum::<f64>()
                        / m.iter().map(|a| (a - mu).powi(2)).sum::<f64>().sqrt()
                };
                let best = (0..10).max_by(|&a, &b| score(&means[a]).total_cmp(&score(&means[b]))).unwrap();
                best == s.label
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.2, "probe accuracy {acc}");
    }
}
