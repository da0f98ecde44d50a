use lfvid::datagen::scenes::{self, Canvas};
use lfvid::datagen::generate_scene;
use lfvid::eval::{psnr, ssim};
use lfvid::fit::{direct_fit, FitConfig, FitInputs};
use lfvid::losses::{total_self_loss, LossTerms, LossWeights};
use lfvid::nn::{bin_centers, blend, count_tokens, RefinementConfig};
use lfvid::warp::FlowField;
use lfvid::{
    center_view, inverse_warp, refocus, td_synthesize, td_synthesize_fixed, AngularGrid,
    DisplacementVector, Image, LightField, TDRepresentation,
};
use proptest::prelude::*;

fn unit_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, len)
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    unit_vec(h * w * 3).prop_map(move |d| Image::new(h, w, 3, d).unwrap())
}

fn td(layers: usize, rank: usize, h: usize, w: usize) -> impl Strategy<Value = TDRepresentation> {
    unit_vec(layers * rank * h * w * 3)
        .prop_map(move |d| TDRepresentation::new(layers, rank, h, w, d).unwrap())
}

fn grid3() -> AngularGrid {
    AngularGrid::square(3).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthesis_stays_in_unit_range(f in td(3, 2, 6, 7), d in prop::collection::vec(-3.0f64..3.0, 3)) {
        let lf = td_synthesize(&f, &DisplacementVector::new(d).unwrap(), grid3()).unwrap();
        prop_assert!(lf.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn uniform_spacing_matches_fixed_model(f in td(3, 2, 5, 6)) {
        let a = td_synthesize(&f, &DisplacementVector::new(vec![-1.0, 0.0, 1.0]).unwrap(), grid3()).unwrap();
        let b = td_synthesize_fixed(&f, grid3()).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn center_view_ignores_displacements(f in td(3, 1, 5, 5), d1 in prop::collection::vec(-4.0f64..4.0, 3), d2 in prop::collection::vec(-4.0f64..4.0, 3)) {
        let a = td_synthesize(&f, &DisplacementVector::new(d1).unwrap(), grid3()).unwrap();
        let b = td_synthesize(&f, &DisplacementVector::new(d2).unwrap(), grid3()).unwrap();
        prop_assert_eq!(center_view(&a), center_view(&b));
    }

    #[test]
    fn rank_sum_splits(f1 in td(2, 1, 4, 5), f2 in td(2, 1, 4, 5), d in prop::collection::vec(-2.0f64..2.0, 2)) {
        // Scale layers so the sum stays below the clip.
        let half = |f: &TDRepresentation| TDRepresentation::new(2, 1, 4, 5, f.data().iter().map(|v| v * 0.7).collect()).unwrap();
        let (f1, f2) = (half(&f1), half(&f2));
        let both = TDRepresentation::new(2, 2, 4, 5, interleave_rank(&f1, &f2)).unwrap();
        let dv = DisplacementVector::new(d).unwrap();
        let sum = td_synthesize(&both, &dv, grid3()).unwrap();
        let a = td_synthesize(&f1, &dv, grid3()).unwrap();
        let b = td_synthesize(&f2, &dv, grid3()).unwrap();
        for ((s, x), y) in sum.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!((s - (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn refocus_of_identical_views_is_the_center(img in image(5, 6), level in 0.0f64..=1.0, alpha in -3.0f64..3.0) {
        // textured views only agree with the center at zero slope; any slope
        // blurs them, so constant views carry the any-slope case
        let lf = LightField::replicate(grid3(), &img).unwrap();
        let out = refocus(&lf, 0.0).unwrap();
        prop_assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        let flat = LightField::filled(grid3(), 5, 6, level);
        prop_assert!(refocus(&flat, alpha).unwrap().data().iter().all(|v| (v - level).abs() < 1e-12));
    }

    #[test]
    fn zero_warp_is_identity(img in image(6, 5)) {
        prop_assert_eq!(inverse_warp(&img, &FlowField::zeros(6, 5)).unwrap(), img);
    }

    #[test]
    fn total_is_linear_in_the_weights(t in prop::collection::vec(0.0f64..5.0, 6), w in prop::collection::vec(0.0f64..3.0, 6)) {
        let terms = LossTerms { photo: t[0], geo: t[1], temp: t[2], occ: t[3], bins: t[4], tv: t[5] };
        let weights = LossWeights { photo: w[0], geo: w[1], temp: w[2], occ: w[3], bins: w[4], tv: w[5] };
        let doubled = LossWeights { photo: 2.0 * w[0], geo: 2.0 * w[1], temp: 2.0 * w[2], occ: 2.0 * w[3], bins: 2.0 * w[4], tv: 2.0 * w[5] };
        let one = total_self_loss(&terms, &weights).unwrap();
        let two = total_self_loss(&terms, &doubled).unwrap();
        let expected: f64 = t.iter().zip(&w).map(|(a, b)| a * b).sum();
        prop_assert!((one.total - expected).abs() <= 1e-9);
        prop_assert!((two.total - 2.0 * one.total).abs() <= 1e-9);
    }

    #[test]
    fn blend_identity_and_passthrough(a in image(4, 4), b in image(4, 4), m in unit_vec(16)) {
        let lf = LightField::replicate(grid3(), &a).unwrap();
        let res = LightField::replicate(grid3(), &b).unwrap();
        let ones = vec![Image::filled(4, 4, 1, 1.0); 9];
        let zeros = vec![Image::zeros(4, 4, 1); 9];
        prop_assert_eq!(blend(&lf, &res, &ones).unwrap(), lf.clone());
        prop_assert_eq!(blend(&lf, &res, &zeros).unwrap(), res.clone());
        let mask = vec![Image::new(4, 4, 1, m.clone()).unwrap(); 9];
        let out = blend(&lf, &res, &mask).unwrap();
        for (i, v) in out.view_slice(4).iter().enumerate() {
            let p = i / 3;
            let want = m[p] * a.data()[i] + (1.0 - m[p]) * b.data()[i];
            prop_assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_centers_are_sorted_and_inside(w in prop::collection::vec(0.01f64..1.0, 1..6), lo in -4.0f64..0.0, span in 0.1f64..8.0) {
        let d = bin_centers(&w, lo, lo + span).unwrap();
        prop_assert_eq!(d.len(), w.len());
        prop_assert!(d.is_sorted());
        prop_assert!(d.values().iter().all(|v| *v >= lo && *v <= lo + span));
    }

    #[test]
    fn sorting_a_displacement_vector_sorts_it(v in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        let mut d = DisplacementVector::new(v.clone()).unwrap();
        d.sort();
        prop_assert!(d.is_sorted());
        prop_assert_eq!(d.len(), v.len());
    }

    #[test]
    fn psnr_symmetric_and_ssim_bounded(a in image(12, 12), b in image(12, 12)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn token_count_is_views_plus_one(n in prop::sample::select(vec![3usize, 5, 7]), patch in prop::sample::select(vec![4usize, 8, 16]), h in 4usize..40, w in 4usize..40) {
        let grid = AngularGrid::square(n).unwrap();
        let config = RefinementConfig { patch, ..Default::default() };
        let (sites, tokens) = count_tokens(&config, grid, h, w);
        prop_assert_eq!(tokens, n * n + 1);
        prop_assert_eq!(sites, h.div_ceil(patch) * w.div_ceil(patch));
    }

    #[test]
    fn fitted_layers_stay_in_unit_range(seed in 0u64..1000, disparity in -1.5f64..1.5) {
        let canvas = Canvas { height: 12, width: 12, grid: grid3(), frames: 1 };
        let truth = generate_scene(&scenes::single_plane(canvas, disparity, (0.0, 0.0), seed)).unwrap();
        let inputs = FitInputs::single(grid3(), truth.center[0].clone(), truth.disparity[0].clone()).unwrap();
        let weights = LossWeights { temp: 0.0, occ: 0.0, ..LossWeights::default() };
        let config = FitConfig { iterations: 15, lr: 0.5, seed, weights, ..FitConfig::default() };
        let out = direct_fit(&inputs, &config).unwrap();
        prop_assert!(out.f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.d.is_sorted());
        prop_assert_eq!(out.d.len(), out.f.layers());
        let again = direct_fit(&inputs, &config).unwrap();
        prop_assert_eq!(out.trace, again.trace);
    }
}

/// Rank-major storage of a two-rank representation from two rank-one ones.
fn interleave_rank(f1: &TDRepresentation, f2: &TDRepresentation) -> Vec<f64> {
    let mut out = TDRepresentation::filled(f1.layers(), 2, f1.height(), f1.width(), 0.0);
    for i in 0..f1.layers() {
        out.layer_mut(i, 0).copy_from_slice(f1.layer(i, 0));
        out.layer_mut(i, 1).copy_from_slice(f2.layer(i, 0));
    }
    out.into_data()
}
