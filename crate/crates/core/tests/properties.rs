use numcore::Tensor;
use proptest::prelude::*;
use tfill::decoder::compose;
use tfill::embed::{mask_downsample, DownsampleRule};
use tfill::harness::config::RunConfig;

fn binary_mask(bits: &[bool], side: usize) -> Tensor {
    Tensor::new([1, 1, side, side], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap()
}

proptest! {
    #[test]
    fn strict_downsample_is_below_mean(bits in prop::collection::vec(any::<bool>(), 64), factor in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let m = binary_mask(&bits, 8);
        let strict = mask_downsample(&m, factor, DownsampleRule::Strict).unwrap();
        let mean = mask_downsample(&m, factor, DownsampleRule::Mean).unwrap();
        for (s, a) in strict.data().iter().zip(mean.data()) {
            prop_assert!(*s <= a.ceil());
            prop_assert!(*s == 0.0 || *a == 1.0);
        }
    }

    #[test]
    fn compose_keeps_visible_pixels(bits in prop::collection::vec(any::<bool>(), 16), seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = binary_mask(&bits, 4);
        let image = Tensor::uniform([1, 3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let fill = Tensor::uniform([1, 3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let out = compose(&m, &image, &fill).unwrap();
        for i in 0..48 {
            let want = if bits[i % 16] { image.data()[i] } else { fill.data()[i] };
            prop_assert_eq!(out.data()[i], want);
        }
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), layers in 0usize..6, lr in 1e-6f64..1e-2, steps in 0usize..10_000) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.layers = layers;
        cfg.lr = lr;
        cfg.steps = steps;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
