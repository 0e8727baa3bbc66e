//! Property tests for invariants that hold over whole input families
//! rather than single examples.

use proptest::prelude::*;

use dr1mask_core::data::{decode_scene, encode_scene, generate_scene, DatasetSpec};
use dr1mask_core::dr1conv::{dr1conv_forward, Dr1ConvLayer, DynamicFactors};
use dr1mask_core::pyramid::{
    backbone_stub, dr1basis, pad_input, tower_top, BackboneParams, BasisParams, PyramidConfig,
    TowerParams, UpsampleMode,
};
use dr1mask_core::tensor::{
    conv2d, crop_to, rand_uniform, softmax_channels, upsample2_nearest, ConvKernel, Pad, Shape,
    Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    /// crop_to(upsample2_nearest(x), h, w) has shape (N, C, h, w) whenever
    /// h <= 2H and w <= 2W.
    #[test]
    fn upsample_then_crop_shape_rule(
        n in 1usize..3, c in 1usize..4,
        h in 1usize..8, w in 1usize..8,
        dh in 0usize..8, dw in 0usize..8,
    ) {
        let th = (2 * h).min(1 + dh);
        let tw = (2 * w).min(1 + dw);
        let x = Tensor::<f32>::ones(Shape::new(n, c, h, w));
        let y = crop_to(&upsample2_nearest(&x), th, tw).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(n, c, th, tw));
    }

    /// Per-pixel softmax over channels sums to one with every value in (0, 1).
    #[test]
    fn softmax_channels_normalizes(seed in 0u64..500, c in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = rand_uniform(Shape::new(1, c, 3, 3), -6.0, 6.0, &mut rng);
        let s = softmax_channels(&x);
        for h in 0..3 {
            for w in 0..3 {
                let mut total = 0.0;
                for ch in 0..c {
                    let v = s.at(0, ch, h, w);
                    prop_assert!(v > 0.0 && v < 1.0);
                    total += v;
                }
                prop_assert!((total - 1.0).abs() <= 1e-6);
            }
        }
    }

    /// Level alignment: under the ceil size rule every upsampled level is
    /// large enough for the crop, and the basis lands at exactly padded/4,
    /// for arbitrary input extents in [16, 257].
    #[test]
    fn aligned_pyramid_over_random_extents(h in 16usize..=257, w in 16usize..=257) {
        let cfg = PyramidConfig {
            tower_width: 2,
            tower_depth: 1,
            basis_width: 2,
            emb_dim: 2,
            emit_stride: 4,
            upsample: UpsampleMode::Nearest,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let backbone = BackboneParams::<f32>::init(&cfg, &mut rng);
        let tower = TowerParams::<f32>::init(&cfg, &mut rng);
        let basis = BasisParams::<f32>::init(&cfg, &mut rng);
        let image: Tensor<f32> = rand_uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng);
        let (padded, _) = pad_input(&image, 4);
        let pyramid = backbone_stub(&padded, &backbone).unwrap();
        // the size rule itself
        let (mut eh, mut ew) = (padded.shape().h.div_ceil(8), padded.shape().w.div_ceil(8));
        for l in dr1mask_core::pyramid::LEVELS {
            let s = pyramid.level(l).shape();
            prop_assert_eq!((s.h, s.w), (eh, ew));
            eh = eh.div_ceil(2);
            ew = ew.div_ceil(2);
        }
        let ctx = tower_top(&pyramid, &tower, &cfg).unwrap();
        let out = dr1basis(&pyramid, &ctx, &basis, &cfg).unwrap();
        prop_assert_eq!(
            (out.f.shape().h, out.f.shape().w),
            (padded.shape().h / 4, padded.shape().w / 4)
        );
    }

    /// Scene records survive an encode/decode round trip bit-exactly for
    /// arbitrary generator settings.
    #[test]
    fn scene_round_trip(
        seed in 0u64..1000,
        ext in 16usize..48,
        stuff in 1u16..5,
        things in 1u16..4,
        max_inst in 0usize..4,
    ) {
        let spec = DatasetSpec {
            seed,
            count: 1,
            height: ext,
            width: ext,
            n_stuff_classes: stuff,
            n_thing_classes: things,
            min_instances: 0,
            max_instances: max_inst,
        };
        let scene = generate_scene(&spec, 0);
        scene.check_invariants().unwrap();
        let buf = encode_scene(&scene);
        let back = decode_scene(&buf).unwrap();
        prop_assert_eq!(&scene, &back);
        prop_assert_eq!(encode_scene(&back), buf);
    }

    /// DR1Conv with all-ones factors is bitwise the static convolution for
    /// arbitrary extents and channel counts.
    #[test]
    fn ones_factors_reduce_to_static(seed in 0u64..500, c in 1usize..5, ext in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, c, ext, ext + 1);
        let x: Tensor<f32> = rand_uniform(s, -1.0, 1.0, &mut rng);
        let w: Tensor<f32> = rand_uniform(Shape::new(c, c, 3, 3), -1.0, 1.0, &mut rng);
        let layer = Dr1ConvLayer::new(ConvKernel::new(w, None).unwrap()).unwrap();
        let out = dr1conv_forward(&x, &DynamicFactors::ones(s), &layer).unwrap();
        let want = conv2d(&x, layer.kernel(), 1, Pad::Same).unwrap();
        prop_assert_eq!(out, want);
    }
}
