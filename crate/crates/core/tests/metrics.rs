use proptest::prelude::*;
use z2h::io::{decode_pnm, encode_pnm};
use z2h::metrics::{foreground_mask, psnr_capped, IOU_BACKGROUND, IOU_TAU};
use z2h::*;

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f32..=1.0, h * w * 3)
        .prop_map(move |d| Image::new(Tensor::new(vec![h, w, 3], d).unwrap()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn symmetric(a in image(12, 13), b in image(12, 13)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(iou_mask(&a, &b, 1.0, 0.05).unwrap(), iou_mask(&b, &a, 1.0, 0.05).unwrap());
        prop_assert_eq!(
            seed_diversity(&[a.clone(), b.clone()]).unwrap(),
            seed_diversity(&[b, a]).unwrap()
        );
    }

    #[test]
    fn ssim_self_is_one(a in image(11, 15)) {
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_in_unit_interval(a in image(6, 6), b in image(6, 6), tau in 0.0f32..0.5) {
        let v = iou_mask(&a, &b, IOU_BACKGROUND, tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn eight_bit_images_survive_pnm(levels in proptest::collection::vec(0u8..=255, 5 * 4 * 3)) {
        let data = levels.iter().map(|&l| f32::from(l) / 255.0).collect();
        let img = Image::new(Tensor::new(vec![5, 4, 3], data).unwrap()).unwrap();
        prop_assert_eq!(decode_pnm(&encode_pnm(&img).unwrap()).unwrap(), img);
    }
}

fn mask_image(fg: &[bool]) -> Image {
    let data = fg.iter().flat_map(|&f| [if f { 0.3 } else { 1.0 }; 3]).collect();
    Image::new(Tensor::new(vec![1, fg.len(), 3], data).unwrap()).unwrap()
}

#[test]
fn iou_grows_with_intersection_at_fixed_union() {
    // a covers all 8 pixels, so the union is fixed while the intersection is k
    let a = mask_image(&[true; 8]);
    let mut last = -1.0;
    for k in 1..=8 {
        let fg: Vec<bool> = (0..8).map(|i| i < k).collect();
        let v = iou_mask(&a, &mask_image(&fg), IOU_BACKGROUND, IOU_TAU).unwrap();
        assert!(v > last);
        assert_eq!(v, k as f64 / 8.0);
        last = v;
    }
}

#[test]
fn mask_uses_max_channel_deviation() {
    let d = vec![1.0, 1.0, 0.96, 1.0, 0.94, 1.0];
    let img = Image::new(Tensor::new(vec![1, 2, 3], d).unwrap()).unwrap();
    assert_eq!(foreground_mask(&img, 1.0, 0.05), vec![false, true]);
}

#[test]
fn capped_psnr_only_caps_identity() {
    let a = Image::filled(4, 4, 3, 0.5).unwrap();
    let b = Image::filled(4, 4, 3, 0.5 + 1e-4).unwrap();
    let v = psnr_capped(&a, &b).unwrap();
    assert!(v > 70.0 && v < 99.0, "{v}");
}
