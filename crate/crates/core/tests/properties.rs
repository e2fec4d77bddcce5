use diffmask::forward::{apply_adjoint, apply_operator, make_coils, BinaryMask, PatternKind};
use diffmask::learner::{renormalize_probs, MaskParams};
use diffmask::phantom::{read_image, write_image};
use diffmask::tensor::{fft2_centered, ifft2_centered, Complex64, ComplexImage, KSpaceGrid, Rng};
use proptest::prelude::*;

fn image(h: usize, w: usize, vals: &[(f64, f64)]) -> ComplexImage {
    ComplexImage::from_vec(h, w, vals.iter().map(|&(re, im)| Complex64::new(re, im)).collect()).unwrap()
}

fn shape_and_values() -> impl Strategy<Value = (usize, usize, Vec<(f64, f64)>)> {
    (1usize..7, 1usize..7)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), h * w)))
}

proptest! {
    #[test]
    fn renormalized_mean_is_one_over_r(theta in prop::collection::vec(-8.0..8.0f64, 1..80), r in 1.0..20.0f64) {
        let p = renormalize_probs(&theta, r).unwrap();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        prop_assert!((mean - 1.0 / r).abs() < 1e-10);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        // order of the logits is kept
        for i in 0..theta.len() {
            for j in 0..theta.len() {
                if theta[i] < theta[j] {
                    prop_assert!(p[i] <= p[j]);
                }
            }
        }
    }

    #[test]
    fn top_mask_spends_the_budget(theta in prop::collection::vec(-4.0..4.0f64, 64), r in 2.0..16.0f64, acs in 0usize..5) {
        let mut params = MaskParams::new(PatternKind::Point, 8, 8, r, acs, 1.0).unwrap();
        params.theta = theta;
        let mask = params.top_mask().unwrap();
        let budget = (64.0 / r).round() as usize;
        prop_assert_eq!(mask.kept_sites(), budget.max(acs * acs));
    }

    #[test]
    fn mask_text_round_trip(keep in prop::collection::vec(any::<bool>(), 30), point in any::<bool>()) {
        let (kind, keep) = if point { (PatternKind::Point, keep) } else { (PatternKind::Line, keep[..6].to_vec()) };
        let mask = BinaryMask::new(kind, 5, 6, keep, 2).unwrap();
        let text = mask.to_text();
        let back = BinaryMask::from_text(&text).unwrap();
        prop_assert_eq!(back.to_text(), text);
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn image_file_round_trip((h, w, vals) in shape_and_values()) {
        let img = image(h, w, &vals);
        let mut buf = Vec::new();
        write_image(&img, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 13 + 16 * h * w);
        prop_assert_eq!(read_image(buf.as_slice()).unwrap(), img);
    }

    #[test]
    fn fft_is_unitary((h, w, vals) in shape_and_values()) {
        let img = image(h, w, &vals);
        let k = fft2_centered(&img).unwrap();
        prop_assert!((k.norm() - img.norm()).abs() <= 1e-10 * img.norm().max(1.0));
        let back = ifft2_centered(&k).unwrap();
        prop_assert!((&back - &img).norm() <= 1e-10 * img.norm().max(1.0));
    }

    #[test]
    fn operator_adjoint_identity(seed in any::<u64>(), coils in 1usize..4, point in any::<bool>()) {
        let (h, w) = (6, 7);
        let mut rng = Rng::new(seed);
        let coil_set = make_coils(h, w, coils, &mut rng).unwrap();
        let kind = if point { PatternKind::Point } else { PatternKind::Line };
        let keep: Vec<bool> = (0..kind.sites(h, w)).map(|_| rng.uniform() < 0.5).collect();
        let mask = BinaryMask::new(kind, h, w, keep, 0).unwrap();
        let x = ComplexImage::from_fn(h, w, |_, _| Complex64::new(rng.normal(), rng.normal()));
        let ys: Vec<KSpaceGrid> = (0..coils)
            .map(|_| KSpaceGrid::from_fn(h, w, |_, _| Complex64::new(rng.normal(), rng.normal())))
            .collect();
        let ax = apply_operator(&x, &coil_set, &mask).unwrap();
        let lhs: f64 = ax.iter().zip(&ys).map(|(a, b)| a.real_dot(b)).sum();
        let rhs = x.real_dot(&apply_adjoint(&ys, &coil_set, &mask).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }
}
