use man_core::arch::{count_params, LkaSpec, ManConfig};
use man_web::{count_model, degrade_image, impulse_map, receptive_field};

#[test]
fn impulse_support_matches_receptive_field() {
    for spec in LkaSpec::PRESETS {
        let side = receptive_field(spec.d, spec.b);
        assert_eq!(side, spec.receptive_field());
        let size = side + 6;
        let map = impulse_map(spec.d, spec.b, size).unwrap();
        assert_eq!(map.len(), size * size);
        assert_eq!(map.iter().filter(|v| **v > 0.0).count(), side * side);
        assert_eq!(map.iter().cloned().fold(0.0, f32::max), 1.0);
    }
    assert!(impulse_map(0, 3, 10).is_err());
    assert!(impulse_map(2, 4, 10).is_err());
}

#[test]
fn counts_match_the_library() {
    let c = count_model("light", 4, "gsau", "metaformer", 1280, 720).unwrap();
    assert_eq!(c.params as u64, count_params(&ManConfig::light(4)).unwrap());
    assert!((c.madds / 47.1e9 - 1.0).abs() < 0.1);
    let mlp = count_model("light", 4, "mlp", "metaformer", 64, 64).unwrap();
    assert!(mlp.params > c.params);
    assert!(count_model("huge", 4, "gsau", "metaformer", 64, 64).is_err());
    assert!(count_model("tiny", 5, "gsau", "metaformer", 64, 64).is_err());
}

#[test]
fn degrade_scores_constant_images_as_perfect() {
    let (w, h) = (36, 30);
    let rgba: Vec<u8> = (0..w * h).flat_map(|_| [90u8, 140, 30, 255]).collect();
    let r = degrade_image(&rgba, w, h, 3).unwrap();
    assert_eq!((r.width(), r.height(), r.lr_width(), r.lr_height()), (36, 30, 12, 10));
    assert_eq!(r.psnr(), 100.0);
    assert_eq!(r.ssim(), 1.0);
    assert_eq!(&r.upscaled()[..4], &[90, 140, 30, 255]);
    assert!(degrade_image(&rgba[..10], w, h, 3).is_err());
    assert!(degrade_image(&rgba, w, h, 5).is_err());
}

#[test]
fn degrade_of_textured_image_is_imperfect() {
    let (w, h) = (48, 48);
    let rgba: Vec<u8> = (0..w * h)
        .flat_map(|i| {
            let (x, y) = (i % w, i / w);
            let v = if (x / 2 + y / 3) % 2 == 0 { 220 } else { 30 };
            [v, v, v, 255]
        })
        .collect();
    let r = degrade_image(&rgba, w, h, 2).unwrap();
    assert!(r.psnr() < 40.0 && r.ssim() < 0.99);
}
