use proptest::prelude::*;
use sosbf_core::geometry::{ImagingGrid, Point2, ReconGrid};
use sosbf_core::raytrace::{build_differential, AnglePair, AnglePairList, RxEndpointRule};
use sosbf_core::recon::{build_regularizer, RegularizerWeights};

const ACCEPTANCE: f64 = 30.0 * std::f64::consts::PI / 180.0;

fn recon() -> ReconGrid {
    ReconGrid::spanning(32, 32, -19.2e-3, 19.2e-3, 0.0, 35.2e-3).unwrap()
}

fn measurement() -> ImagingGrid {
    ImagingGrid::new(5, 6, 2e-3, 5e-3, Point2::new(-4e-3, 4e-3)).unwrap()
}

fn pair_strategy() -> impl Strategy<Value = (f64, f64, f64)> {
    (-12.0f64..12.0, -12.0f64..12.0, -5.0f64..5.0)
        .prop_filter("distinct angles", |(a, b, _)| (a - b).abs() > 0.5)
        .prop_map(|(a, b, off)| (a.to_radians(), b.to_radians(), ((a + b) / 2.0 + off).to_radians()))
}

fn pairs(a: f64, b: f64, psf: f64) -> AnglePairList {
    AnglePairList::new(vec![a, b], vec![AnglePair { i: 0, j: 1, psf_angle: psf }]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn swapping_a_pair_negates_every_row((a, b, psf) in pair_strategy()) {
        let p = pairs(a, b, psf);
        let l = build_differential(&p, &RxEndpointRule::FixedAngle, &recon(), &measurement(), ACCEPTANCE).unwrap();
        let s = build_differential(&p.swapped(), &RxEndpointRule::FixedAngle, &recon(), &measurement(), ACCEPTANCE)
            .unwrap();
        prop_assert_eq!(l.rows(), s.rows());
        for r in 0..l.rows() {
            let (lc, lv) = l.row(r);
            let (sc, sv) = s.row(r);
            prop_assert_eq!(lc, sc);
            for (x, y) in lv.iter().zip(sv) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn row_sums_are_path_length_differences((a, b, psf) in pair_strategy()) {
        // straight paths z / cos(angle) per leg, all inside the grid
        let p = pairs(a, b, psf);
        let ((ti, ri), (tj, rj)) = p.steering(0, ACCEPTANCE).unwrap();
        let l = build_differential(&p, &RxEndpointRule::FixedAngle, &recon(), &measurement(), ACCEPTANCE).unwrap();
        let m = measurement();
        for (r, px) in m.positions().enumerate() {
            let want = px.z * (1.0 / tj.cos() + 1.0 / rj.cos() - 1.0 / ti.cos() - 1.0 / ri.cos());
            prop_assert!((l.row_sum(r) - want).abs() < 1e-12, "row {}: {} vs {}", r, l.row_sum(r), want);
        }
    }
}

#[test]
fn bisector_aligned_pairs_have_zero_net_length() {
    let (a, b) = (8f64.to_radians(), -4f64.to_radians());
    let p = pairs(a, b, 0.5 * (a + b));
    let l = build_differential(&p, &RxEndpointRule::FixedAngle, &recon(), &measurement(), ACCEPTANCE).unwrap();
    for r in 0..l.rows() {
        assert!(l.row_sum(r).abs() < 1e-15);
    }
}

#[test]
fn pixels_outside_the_reconstruction_grid_are_rejected() {
    let far = ImagingGrid::new(2, 2, 1e-3, 1e-3, Point2::new(25e-3, 4e-3)).unwrap();
    let p = pairs(0.1, -0.1, 0.0);
    assert!(build_differential(&p, &RxEndpointRule::FixedAngle, &recon(), &far, ACCEPTANCE).is_err());
}

fn small() -> ReconGrid {
    ReconGrid::new(7, 6, 1e-3, 2e-3, Point2::new(-3.5e-3, 0.0)).unwrap()
}

fn map_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 42)
}

fn mirrored(v: &[f64], g: &ReconGrid) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for ix in 0..g.nx {
        for iz in 0..g.nz {
            out[g.cell_index(g.nx - 1 - ix, iz)] = v[g.cell_index(ix, iz)];
        }
    }
    out
}

proptest! {
    #[test]
    fn regularizer_ignores_constant_offsets(v in map_strategy(), c in -5.0f64..5.0) {
        let reg = build_regularizer(&small(), RegularizerWeights::default(), 0.1).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((reg.norm(&v).unwrap() - reg.norm(&shifted).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn regularizer_is_absolutely_homogeneous(v in map_strategy(), k in -4.0f64..4.0) {
        let reg = build_regularizer(&small(), RegularizerWeights::default(), 0.1).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| k * x).collect();
        let want = k.abs() * reg.norm(&v).unwrap();
        prop_assert!((reg.norm(&scaled).unwrap() - want).abs() < 1e-12 * (1.0 + want));
    }

    #[test]
    fn regularizer_is_mirror_symmetric(v in map_strategy()) {
        let g = small();
        let reg = build_regularizer(&g, RegularizerWeights::default(), 0.1).unwrap();
        let a = reg.norm(&v).unwrap();
        let b = reg.norm(&mirrored(&v, &g)).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + a));
    }

    #[test]
    fn penalty_scales_with_lambda_and_cell_size(v in map_strategy(), lambda in 0.01f64..1.0) {
        let g = small();
        let reg = build_regularizer(&g, RegularizerWeights::default(), lambda).unwrap();
        let h = (g.cell_width * g.cell_height).sqrt();
        let want = lambda * h * reg.norm(&v).unwrap();
        prop_assert!((reg.penalty(&v).unwrap() - want).abs() <= 1e-15 * (1.0 + want));
    }
}
