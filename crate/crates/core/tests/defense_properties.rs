use freqattack_core::defense::{bit_depth_reduce, jpeg_compress};
use freqattack_core::{ColorSpace, ImageTensor};
use proptest::prelude::*;

fn image_in(lo: f32, hi: f32) -> impl Strategy<Value = ImageTensor<f32>> {
    prop::collection::vec(lo..=hi, 3 * 16 * 16).prop_map(|d| ImageTensor::new([1, 3, 16, 16], d, ColorSpace::Rgb).unwrap())
}

fn image() -> impl Strategy<Value = ImageTensor<f32>> {
    image_in(0.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jpeg_is_nearly_idempotent(x in image(), quality in prop::sample::select(vec![10u8, 50, 75, 90, 100])) {
        let once = jpeg_compress(&x, quality).unwrap();
        let twice = jpeg_compress(&once, quality).unwrap();
        prop_assert!(once.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(twice.zip_map(&once, |a, b| a - b).unwrap().max_abs() <= 2.0 / 255.0);
    }

    #[test]
    fn jpeg_without_clipping_is_idempotent(x in image_in(0.3, 0.7), quality in prop::sample::select(vec![10u8, 50, 75, 90, 100])) {
        let once = jpeg_compress(&x, quality).unwrap();
        let twice = jpeg_compress(&once, quality).unwrap();
        prop_assert!(twice.zip_map(&once, |a, b| a - b).unwrap().max_abs() <= 1e-4);
    }

    #[test]
    fn bit_depth_is_idempotent_and_quantized(x in image(), bits in 1u8..=8) {
        let once = bit_depth_reduce(&x, bits).unwrap();
        prop_assert_eq!(bit_depth_reduce(&once, bits).unwrap(), once.clone());
        prop_assert!(once.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for c in 0..3 {
            let mut levels: Vec<u32> = once.plane(0, c).iter().map(|v| v.to_bits()).collect();
            levels.sort_unstable();
            levels.dedup();
            prop_assert!(levels.len() <= 1 << bits);
        }
    }
}
