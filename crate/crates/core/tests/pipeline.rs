//! Cross-module properties: generated data through the models and the file formats.

use proptest::prelude::*;
use pvm_core::datagen::{gen_depth_field, gen_mask, gen_shapes_dataset, stream_rng, DepthFieldSpec, MaskPolicy, Regime, ShapesSpec, Stream};
use pvm_core::io::{load_checkpoint, load_mask, load_tensor, save_checkpoint, save_mask, save_tensor};
use pvm_core::models::{cls_forward, dc_forward, ClsConfig, ClsParams, DepthConfig, DepthParams, Variant};
use pvm_core::params::{load_named, named};
use pvm_core::pvm::TokenPadding;
use pvm_core::tensor::{MaskedTensor, Tensor};
use rand::Rng;

fn small_cls(padding: TokenPadding, variant: Variant) -> ClsConfig {
    ClsConfig {
        image_size: 16,
        patch: 4,
        dim: 8,
        expand: 1,
        states: 2,
        classes: 4,
        token_padding: padding,
        variant,
        ..ClsConfig::default()
    }
}

fn small_depth(variant: Variant) -> DepthConfig {
    DepthConfig {
        image_size: 16,
        features: 4,
        patch: 2,
        dim: 8,
        expand: 1,
        states: 2,
        rpssb_blocks: 1,
        pvmm_per_block: 1,
        variant,
        ..DepthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_shapes_classify_independently_of_placeholders(seed in 0u64..1000, pad in 0usize..3) {
        let cfg = small_cls(TokenPadding::ALL[pad], Variant::Pvm);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let p = ClsParams::init(&mut rng, &cfg).unwrap();
        let img = gen_shapes_dataset(&ShapesSpec { size: 16, count: 4, classes: 4, seed }).unwrap();
        let m = gen_mask(&MaskPolicy::Regime { regime: Regime::Hard }, 16, 16, &mut rng).unwrap();
        let x = MaskedTensor::new(img[0].image.clone(), m).unwrap();
        let y = x.with_placeholders(|| rng.gen_range(-50.0..50.0));
        prop_assert!(cls_forward(&x, &cfg, &p).unwrap().bit_eq(&cls_forward(&y, &cfg, &p).unwrap()));
    }

    #[test]
    fn vm_classifier_sees_placeholders(seed in 0u64..1000) {
        let cfg = small_cls(TokenPadding::Learned, Variant::Vm);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let p = ClsParams::init(&mut rng, &cfg).unwrap();
        let img = gen_shapes_dataset(&ShapesSpec { size: 16, count: 1, classes: 1, seed }).unwrap();
        let m = gen_mask(&MaskPolicy::Regime { regime: Regime::Easy }, 16, 16, &mut rng).unwrap();
        let x = MaskedTensor::new(img[0].image.clone(), m).unwrap();
        let y = x.with_placeholders(|| rng.gen_range(1.0..50.0));
        prop_assert!(!cls_forward(&x, &cfg, &p).unwrap().bit_eq(&cls_forward(&y, &cfg, &p).unwrap()));
    }

    #[test]
    fn sparse_depth_completes_to_a_dense_map(seed in 0u64..1000) {
        let cfg = small_depth(Variant::Pvm);
        let p = DepthParams::init(&mut stream_rng(seed, Stream::Init, 0), &cfg).unwrap();
        let s = gen_depth_field(&DepthFieldSpec { size: 16, count: 1, density: 0.05, seed }, 0).unwrap();
        let (pred, iters) = dc_forward(&s.input, &cfg, &p).unwrap();
        prop_assert!(pred.mask().all_valid());
        prop_assert!(pred.values().data().iter().all(|v| v.is_finite()));
        prop_assert!(s.input.mask().all_valid() || iters > 0);
    }

    #[test]
    fn generated_masks_round_trip_through_files(seed in 0u64..1000, r in 0usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_mask(&MaskPolicy::Regime { regime: Regime::ALL[r] }, 24, 24, &mut stream_rng(seed, Stream::Mask, 0)).unwrap();
        save_mask(dir.path().join("m.pvmt"), &m).unwrap();
        prop_assert_eq!(load_mask(dir.path().join("m.pvmt")).unwrap(), m);
        let s = gen_depth_field(&DepthFieldSpec { size: 8, count: 1, density: 0.2, seed }, 0).unwrap();
        save_tensor(dir.path().join("gt.pvmt"), &s.gt).unwrap();
        prop_assert!(load_tensor::<f32>(dir.path().join("gt.pvmt")).unwrap().bit_eq(&s.gt));
    }
}

#[test]
fn checkpoint_restores_a_depth_model() {
    let cfg = small_depth(Variant::Pvm);
    let p = DepthParams::init(&mut stream_rng(1, Stream::Init, 0), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &named(&p), "abc").unwrap();
    let ck = load_checkpoint(dir.path(), Some("abc")).unwrap();
    let mut q = DepthParams::init(&mut stream_rng(2, Stream::Init, 0), &cfg).unwrap();
    assert_ne!(named(&q), named(&p));
    load_named(&mut q, &ck.params).unwrap();
    let s = gen_depth_field(&DepthFieldSpec { size: 16, count: 1, density: 0.1, seed: 0 }, 0).unwrap();
    let a = dc_forward(&s.input, &cfg, &p).unwrap().0;
    let b = dc_forward(&s.input, &cfg, &q).unwrap().0;
    assert!(a.values().bit_eq(b.values()));
    assert!(load_checkpoint(dir.path(), Some("other")).is_err());
}

#[test]
fn fully_valid_depth_input_skips_filling() {
    let cfg = small_depth(Variant::Pvm);
    let p = DepthParams::init(&mut stream_rng(3, Stream::Init, 0), &cfg).unwrap();
    let x = MaskedTensor::fully_valid(Tensor::full(vec![1, 16, 16], 10.0f32)).unwrap();
    assert_eq!(dc_forward(&x, &cfg, &p).unwrap().1, 0);
}
