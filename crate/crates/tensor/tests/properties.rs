use proptest::prelude::*;
use ufo_tensor::{bilinear_sample_array, DenseArray, Graph};

fn shape_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    // Right-aligned pairs where each axis either matches or one side is 1.
    (1usize..=4, 0usize..=3)
        .prop_flat_map(|(rank, drop)| {
            let dims = proptest::collection::vec((1usize..=3, 0u8..3), rank);
            (dims, Just(drop.min(rank - 1)))
        })
        .prop_map(|(dims, drop)| {
            let a: Vec<usize> = dims.iter().map(|&(d, k)| if k == 1 { 1 } else { d }).collect();
            let b: Vec<usize> = dims.iter().map(|&(d, k)| if k == 2 { 1 } else { d }).collect();
            (a, b[drop..].to_vec())
        })
}

fn naive_broadcast_add(a: &DenseArray<f64>, b: &DenseArray<f64>, out: &[usize]) -> Vec<f64> {
    let r = out.len();
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (sa, sb) = (pad(a.shape()), pad(b.shape()));
    let total: usize = out.iter().product();
    let mut res = Vec::with_capacity(total);
    for flat in 0..total {
        let mut idx = vec![0; r];
        let mut rem = flat;
        for ax in (0..r).rev() {
            idx[ax] = rem % out[ax];
            rem /= out[ax];
        }
        let pick = |s: &[usize]| -> usize {
            let mut off = 0;
            for ax in 0..r {
                off = off * s[ax] + if s[ax] == 1 { 0 } else { idx[ax] };
            }
            off
        };
        res.push(a.data()[pick(&sa)] + b.data()[pick(&sb)]);
    }
    res
}

proptest! {
    #[test]
    fn broadcasting_matches_loop_oracle((sa, sb) in shape_pair(), seed in 0u64..1000) {
        let a = DenseArray::from_fn(&sa, |i| (i as f64 + seed as f64).sin());
        let b = DenseArray::from_fn(&sb, |i| (i as f64 * 0.7 - seed as f64).cos());
        let g = Graph::<f64>::new();
        let y = g.constant(a.clone()).add(g.constant(b.clone())).unwrap();
        let want = naive_broadcast_add(&a, &b, &y.shape());
        let got = y.value().data().to_vec();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        vals in proptest::collection::vec(-20.0f64..20.0, 12),
        shift in -50.0f64..50.0,
        axis in 0usize..2,
    ) {
        let g = Graph::<f64>::new();
        let x = DenseArray::from_f64(&[3, 4], &vals).unwrap();
        let y = g.constant(x.clone()).softmax(axis).unwrap();
        let ys = y.sum(axis, false).unwrap();
        for &s in ys.value().data() {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted = g.constant(x.map(|v| v + shift)).softmax(axis).unwrap();
        for (p, q) in y.value().data().iter().zip(shifted.value().data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_single_precision_sums_to_one(vals in proptest::collection::vec(-30.0f32..30.0, 8)) {
        let g = Graph::<f32>::new();
        let y = g.constant(DenseArray::new(&[8], vals).unwrap()).softmax(0).unwrap();
        prop_assert!((y.value().data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_exact_on_lattice_and_linear_between(
        x in 0usize..5, y in 0usize..4, t in 0.0f64..1.0,
    ) {
        let map = DenseArray::from_fn(&[2, 4, 5], |i| ((i * 31) % 17) as f64 - 8.0);
        let (s, m) = bilinear_sample_array(&map, &[[x as f64, y as f64]]).unwrap();
        prop_assert!(m.get(0));
        prop_assert_eq!(s.data()[0], map.at(&[0, y, x]));
        prop_assert_eq!(s.data()[1], map.at(&[1, y, x]));
        if x + 1 < 5 {
            let (s, m) = bilinear_sample_array(&map, &[[x as f64 + t, y as f64]]).unwrap();
            prop_assert!(m.get(0));
            let want = (1.0 - t) * map.at(&[0, y, x]) + t * map.at(&[0, y, x + 1]);
            prop_assert!((s.data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_is_zero_exactly_when_a_weighted_corner_is_outside(
        u in -2.0f64..7.0, v in -2.0f64..6.0,
    ) {
        let map = DenseArray::<f64>::ones(&[1, 4, 5]);
        let (s, m) = bilinear_sample_array(&map, &[[u, v]]).unwrap();
        let axis_ok = |c: f64, n: usize| {
            let f = c.floor();
            let lo_ok = f >= 0.0 && f <= (n - 1) as f64;
            let hi_needed = c > f;
            let hi_ok = f + 1.0 <= (n - 1) as f64 && f + 1.0 >= 0.0;
            lo_ok && (!hi_needed || hi_ok)
        };
        let inside = axis_ok(u, 5) && axis_ok(v, 4);
        prop_assert_eq!(m.get(0), inside);
        if inside {
            prop_assert!((s.data()[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_linear_along_depth(z in 0.0f64..2.0) {
        let vol = DenseArray::from_fn(&[1, 3, 2, 2], |i| (i / 4) as f64 * 2.0 + 1.0);
        let g = Graph::<f64>::new();
        let (s, m) = g.constant(vol).trilinear_sample(&[[0.5, 0.5, z]]).unwrap();
        prop_assert!(m.get(0));
        prop_assert!((s.item() - (1.0 + 2.0 * z)).abs() < 1e-12);
    }
}
