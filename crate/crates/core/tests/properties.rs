use proptest::prelude::*;
use splitquant_core::clustering::{kmeans3, kmeans3_traced};
use splitquant_core::quantizer::{int_range, QuantParams};
use splitquant_core::tensor_store::{pack_i2, pack_i4, unpack_i2, unpack_i4};

fn params() -> impl Strategy<Value = QuantParams> {
    (
        0.0f64..100.0,
        0.0f64..100.0,
        prop::sample::select(vec![2u8, 4, 8]),
    )
        .prop_filter("non-empty range", |(b, a, _)| b + a > 0.0)
        .prop_map(|(b, a, bits)| QuantParams::new(-b, a, bits).unwrap())
}

fn spread_values() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1000.0f32..1000.0, 3..200).prop_filter("three distinct values", |v| {
        let mut s = v.clone();
        s.sort_by(f32::total_cmp);
        s.dedup();
        s.len() >= 3
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn quantize_is_monotone_and_bounded(p in params(), a in -200.0f32..200.0, b in -200.0f32..200.0) {
        let (lo, hi) = int_range(p.bits);
        let (qa, qb) = (p.quantize(a) as i32, p.quantize(b) as i32);
        prop_assert!((lo..=hi).contains(&qa) && (lo..=hi).contains(&qb));
        if a <= b {
            prop_assert!(qa <= qb);
        }
        prop_assert_eq!(p.quantize(0.0) as i32, p.zero_point);
        prop_assert_eq!(p.dequantize(p.zero_point as i8), 0.0);
    }

    #[test]
    fn dequantized_values_stay_in_range(p in params(), x in -200.0f32..200.0) {
        let back = p.dequantize(p.quantize(x)) as f64;
        let step = 1.0 / p.scale;
        prop_assert!(back >= p.beta - step && back <= p.alpha + step);
    }

    #[test]
    fn i4_packing_round_trips(v in prop::collection::vec(-8i8..=7, 0..64)) {
        let packed = pack_i4(&v);
        prop_assert_eq!(packed.len(), v.len().div_ceil(2));
        prop_assert_eq!(unpack_i4(&packed, v.len()), v);
    }

    #[test]
    fn i2_packing_round_trips(v in prop::collection::vec(-2i8..=1, 0..64)) {
        let packed = pack_i2(&v);
        prop_assert_eq!(packed.len(), v.len().div_ceil(4));
        prop_assert_eq!(unpack_i2(&packed, v.len()), v);
    }

    #[test]
    fn kmeans_ignores_order(v in spread_values(), rot in 0usize..200) {
        let a = kmeans3(&v, 100, 1e-6).unwrap();
        let mut w = v.clone();
        w.rotate_left(rot % v.len());
        w.reverse();
        let b = kmeans3(&w, 100, 1e-6).unwrap();
        prop_assert_eq!(a.centroids, b.centroids);
        prop_assert_eq!(a.boundaries, b.boundaries);
        prop_assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
        let mut la = a.labels.clone();
        let mut lb = b.labels.clone();
        la.sort();
        lb.sort();
        prop_assert_eq!(la, lb);
    }

    #[test]
    fn kmeans_clusters_are_intervals(v in spread_values()) {
        let a = kmeans3(&v, 100, 1e-6).unwrap();
        prop_assert!(a.centroids[0] < a.centroids[1] && a.centroids[1] < a.centroids[2]);
        prop_assert_eq!(a.boundaries[0], (a.centroids[0] + a.centroids[1]) / 2.0);
        let mut pairs: Vec<(f32, u8)> = v.iter().copied().zip(a.labels.iter().copied()).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        for (x, l) in pairs {
            prop_assert_eq!(a.label_of(x), l);
        }
        prop_assert!(a.counts().iter().all(|&c| c > 0));
    }

    #[test]
    fn lloyd_inertia_never_rises(v in spread_values()) {
        let (_, trace) = kmeans3_traced(&v, 100, 1e-6).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9, "trace {:?}", trace);
        }
    }
}

#[test]
fn separated_outliers_get_their_own_clusters() {
    let mut r = splitquant_core::harness::rng(21);
    let mut v: Vec<f32> = (0..1000)
        .map(|_| splitquant_core::harness::bell(&mut r) as f32)
        .collect();
    // Ten per side: with only a couple, trisecting the bulk is cheaper.
    v.extend([10.0; 10]);
    v.extend([-10.0; 10]);
    let a = kmeans3(&v, 100, 1e-6).unwrap();
    for (x, l) in v.iter().zip(&a.labels) {
        let want = if *x == -10.0 {
            0
        } else if *x == 10.0 {
            2
        } else {
            1
        };
        assert_eq!(*l, want, "value {x} {:?}", a.centroids);
    }
}
