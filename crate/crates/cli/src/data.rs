//! Datasets of an experiment, generated from its config.

use anyhow::Result;
use rand::Rng;
use pvm_core::datagen::{gen_depth_field, gen_mask, gen_shapes_dataset, stream_rng, DepthFieldSpec, MaskPolicy, Regime, ShapesSpec, Stream};
use pvm_core::tensor::{MaskedTensor, Tensor, ValidityMask};

use crate::config::{ExperimentConfig, Task};

/// Which samples to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Test samples under a full-image stress mask.
    Stress(Regime),
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Stress(r) => r.name(),
        }
    }

    fn mask_stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Stress(Regime::Easy) => 2,
            Split::Stress(Regime::Hard) => 3,
            Split::Stress(Regime::Extreme) => 4,
        }
    }
}

/// Test images come from a seed disjoint from the training images.
fn image_seed(data_seed: u64, split: Split) -> u64 {
    match split {
        Split::Train => data_seed,
        _ => data_seed ^ 0x7E57_5EED_0000_0000,
    }
}

fn mask_rng(data_seed: u64, split: Split, i: usize) -> impl Rng {
    stream_rng(data_seed, Stream::Mask, (split.mask_stream() << 32) | i as u64)
}

#[derive(Clone, Debug)]
pub struct ClsItem {
    /// Invalid pixels are zero.
    pub x: MaskedTensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct DepthItem {
    pub x: MaskedTensor<f32>,
    pub gt: Tensor<f32>,
    pub gt_mask: ValidityMask,
}

#[derive(Clone, Debug)]
pub enum Dataset {
    Cls(Vec<ClsItem>),
    Depth(Vec<DepthItem>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Cls(v) => v.len(),
            Dataset::Depth(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean invalid fraction of the input masks.
    pub fn mean_invalid_fraction(&self) -> f64 {
        let fractions: Vec<f64> = match self {
            Dataset::Cls(v) => v.iter().map(|it| it.x.mask().invalid_fraction()).collect(),
            Dataset::Depth(v) => v.iter().map(|it| it.x.mask().invalid_fraction()).collect(),
        };
        fractions.iter().sum::<f64>() / fractions.len().max(1) as f64
    }
}

pub fn build(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let count = if split == Split::Train { cfg.data.train } else { cfg.data.test };
    let size = cfg.image_size();
    let seed = image_seed(cfg.data.seed, split);
    match cfg.task {
        Task::Cls => {
            let classes = cfg.cls.as_ref().map_or(10, |c| c.classes);
            let images = gen_shapes_dataset(&ShapesSpec { size, count, classes, seed })?;
            let policy = match split {
                Split::Stress(regime) => MaskPolicy::Regime { regime },
                _ => cfg.mask_policy(),
            };
            let items = images
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    let m = gen_mask(&policy, size, size, &mut mask_rng(cfg.data.seed, split, i))?;
                    Ok(ClsItem {
                        x: MaskedTensor::new(s.image, m)?,
                        label: s.label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::Cls(items))
        }
        Task::Depth => {
            let spec = DepthFieldSpec {
                size,
                count,
                density: cfg.data.density,
                seed,
            };
            let items = (0..count)
                .map(|i| {
                    let s = gen_depth_field(&spec, i as u64)?;
                    let (_, sample_mask) = s.input.clone().into_parts();
                    let mask = match split {
                        Split::Stress(regime) => {
                            let keep = gen_mask(&MaskPolicy::Regime { regime }, size, size, &mut mask_rng(cfg.data.seed, split, i))?;
                            let mut m = sample_mask.and(&keep)?;
                            if !m.any_valid() {
                                // Keep one sample so the input is never empty.
                                let first = sample_mask.bits().iter().position(|&b| b).expect("sample mask has a valid pixel");
                                m.bits_mut()[first] = true;
                            }
                            m
                        }
                        _ => sample_mask,
                    };
                    Ok(DepthItem {
                        x: MaskedTensor::new(s.gt.clone(), mask)?,
                        gt_mask: ValidityMask::ones(vec![size, size]),
                        gt: s.gt,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::Depth(items))
        }
    }
}
