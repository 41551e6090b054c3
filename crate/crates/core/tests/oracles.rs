mod common;

use common::*;
use pbnet_core::losses::boundary_loss;
use pbnet_core::metrics::{confusion_masks, dice, hausdorff, jaccard, sensitivity, specificity};
use pbnet_core::mgpm::{cell_merge, cell_split};
use pbnet_core::morphology::{boundary_band, boundary_confidence, dilate, erode};
use pbnet_core::MorphKernel;
use proptest::prelude::*;

fn k(n: usize) -> MorphKernel {
    MorphKernel::new(n).unwrap()
}

#[test]
fn dilate_erode_band_match_nested_loops() {
    let mut r = rng(11);
    for &size in &TABLE_KERNELS {
        for _ in 0..20 {
            let v = random_map(&mut r, 256);
            let t = map_tensor(&v, 16, 16);
            assert_eq!(values_f32(&dilate(&t, k(size)).unwrap()), oracle_dilate(&v, 16, 16, size));
            assert_eq!(values_f32(&erode(&t, k(size)).unwrap()), oracle_erode(&v, 16, 16, size));
            assert_eq!(values_f32(&boundary_band(&t, k(size)).unwrap()), oracle_band(&v, 16, 16, size));
        }
    }
}

#[test]
fn disk_confidence_is_ternary_on_the_band() {
    let (h, w) = (32, 32);
    let disk: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32 - 15.5, (i % w) as f32 - 15.5);
            if y * y + x * x <= 36.0 { 1.0 } else { 0.0 }
        })
        .collect();
    let m = values_f32(&boundary_confidence(&map_tensor(&disk, h, w), k(3), k(5)).unwrap());
    let dil = oracle_dilate(&disk, h, w, 3);
    let ero = oracle_erode(&disk, h, w, 5);
    for i in 0..h * w {
        let band = dil[i] == 1.0 && ero[i] == 0.0;
        assert!(m[i] == 0.0 || m[i] == 0.5 || m[i] == 1.0);
        assert_eq!(m[i] == 0.5, band, "pixel {i}");
    }
}

#[test]
fn step_edge_boundary_loss_matches_nested_loops() {
    let (h, w, size) = (16, 16, 5);
    let p = step_edge(h, w, 8);
    let g = step_edge(h, w, 10);
    let bp = oracle_band_f64(&p, h, w, size);
    let bg = oracle_band_f64(&g, h, w, size);
    let expected = bp.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (h * w) as f64;
    let got = scalar(&boundary_loss(&map_tensor_f64(&p, h, w), &map_tensor_f64(&g, h, w), k(size)).unwrap());
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert!(expected > 0.0);
}

#[test]
fn confusion_metrics_match_pixel_counting() {
    let mut r = rng(5);
    for _ in 0..100 {
        let p = random_bits(&mut r, 1024, 0.3);
        let t = random_bits(&mut r, 1024, 0.3);
        let c = confusion_masks(&mask(32, 32, p.clone()), &mask(32, 32, t.clone())).unwrap();
        let o = oracle_confusion(&p, &t);
        assert_eq!(c, o);
        let (tp, fp, fn_, tn) = (o.tp as f64, o.fp as f64, o.fn_ as f64, o.tn as f64);
        assert_eq!(dice(&c), 2.0 * tp / (2.0 * tp + fp + fn_));
        assert_eq!(jaccard(&c), tp / (tp + fp + fn_));
        assert_eq!(sensitivity(&c), Some(tp / (tp + fn_)));
        assert_eq!(specificity(&c), Some(tn / (tn + fp)));
    }
}

#[test]
fn hausdorff_matches_exhaustive_pairs() {
    let mut r = rng(8);
    for _ in 0..40 {
        let a = random_blobs(&mut r, 40, 40, 3, 500);
        let b = random_blobs(&mut r, 40, 40, 3, 500);
        let (hd, hd95) = oracle_hausdorff(&a, &b, 40);
        let got = hausdorff(&mask(40, 40, a), &mask(40, 40, b)).unwrap();
        assert_eq!(got.hd, hd);
        assert!((got.hd95 - hd95).abs() <= 1e-9, "{} vs {hd95}", got.hd95);
    }
}

#[test]
fn morphology_commutes_with_flips() {
    let mut r = rng(3);
    let v = random_map(&mut r, 12 * 20);
    let t = map_tensor(&v, 12, 20);
    for size in [3, 7] {
        let a = dilate(&t.flip(&[3]).unwrap(), k(size)).unwrap();
        let b = dilate(&t, k(size)).unwrap().flip(&[3]).unwrap();
        assert_eq!(values_f32(&a), values_f32(&b));
        let a = erode(&t.flip(&[2]).unwrap(), k(size)).unwrap();
        let b = erode(&t, k(size)).unwrap().flip(&[2]).unwrap();
        assert_eq!(values_f32(&a), values_f32(&b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dice_jaccard_identity(p in prop::collection::vec(any::<bool>(), 64), t in prop::collection::vec(any::<bool>(), 64)) {
        let c = confusion_masks(&mask(8, 8, p), &mask(8, 8, t)).unwrap();
        prop_assert_eq!(c.tp + c.fp + c.tn + c.fn_, 64);
        let (d, j) = (dice(&c), jaccard(&c));
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!((j - d / (2.0 - d)).abs() <= 1e-12);
    }

    #[test]
    fn erosion_below_map_below_dilation(v in prop::collection::vec(0f32..1.0, 81), size in prop::sample::select(vec![3usize, 5, 9])) {
        let t = map_tensor(&v, 9, 9);
        let d = values_f32(&dilate(&t, k(size)).unwrap());
        let e = values_f32(&erode(&t, k(size)).unwrap());
        for i in 0..81 {
            prop_assert!(e[i] <= v[i] && v[i] <= d[i]);
        }
    }

    #[test]
    fn binary_confidence_is_ternary(bits in prop::collection::vec(any::<bool>(), 144)) {
        let v: Vec<f32> = bits.iter().map(|b| *b as u8 as f32).collect();
        let m = values_f32(&boundary_confidence(&map_tensor(&v, 12, 12), k(3), k(5)).unwrap());
        prop_assert!(m.iter().all(|x| *x == 0.0 || *x == 0.5 || *x == 1.0));
    }

    #[test]
    fn cell_split_round_trips(seed in any::<u64>(), n in prop::sample::select(vec![1usize, 2, 4])) {
        let mut r = rng(seed);
        let v = random_map(&mut r, 3 * 8 * 8);
        let x = candle_core::Tensor::from_vec(v.clone(), (1, 3, 8, 8), &candle_core::Device::Cpu).unwrap();
        let s = cell_split(&x, n).unwrap();
        prop_assert_eq!(s.dims(), &[1, 3 * n * n, 8 / n, 8 / n]);
        let mut sorted = values_f32(&s);
        let mut orig = v.clone();
        sorted.sort_by(f32::total_cmp);
        orig.sort_by(f32::total_cmp);
        prop_assert_eq!(sorted, orig);
        prop_assert_eq!(values_f32(&cell_merge(&s, n).unwrap()), v);
    }
}
