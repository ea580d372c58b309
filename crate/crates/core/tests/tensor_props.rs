use proptest::prelude::*;

use tpis::imgcore::Raster;
use tpis::tenpool::{coherent_tensor, compute_tensors, multiscale_tensor, pool, unpool, TensorPoolConfig, TensorSet};

fn raster_strategy(h: usize, w: usize) -> impl Strategy<Value = Raster> {
    proptest::collection::vec(0.0..1.0f64, h * w).prop_map(move |v| Raster::new(h, w, 1, v).unwrap())
}

fn max_abs_diff(a: &Raster, b: &Raster) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn antipodal_pair_entries_are_forced(img in raster_strategy(7, 9)) {
        let ts = compute_tensors(&img, 2, 1.0).unwrap();
        prop_assert_eq!(ts.len(), 3);
        for ((a, b), c) in ts.entry(0, 0).data().iter().zip(ts.entry(0, 1).data()).zip(ts.entry(1, 1).data()) {
            prop_assert_eq!(*b, -*a);
            prop_assert_eq!(*c, *a);
        }
    }

    #[test]
    fn tensor_set_is_symmetric_and_sized(img in raster_strategy(8, 8), n in 2usize..7) {
        let ts = compute_tensors(&img, n, 1.5).unwrap();
        prop_assert_eq!(ts.len(), n * (n + 1) / 2);
        for k in 0..n {
            for m in 0..n {
                prop_assert_eq!(ts.entry(k, m), ts.entry(m, k));
                prop_assert_eq!(ts.entry(k, m).dims(), (8, 8));
            }
        }
    }

    #[test]
    fn fused_map_spans_unit_interval(img in raster_strategy(16, 24), levels in 1usize..5) {
        let cfg = TensorPoolConfig { levels, ..TensorPoolConfig::default() };
        let m = multiscale_tensor(&img, &cfg).unwrap();
        prop_assert!(m.levels_used <= levels);
        let (lo, hi) = m.map.min_max();
        if hi > 0.0 {
            prop_assert_eq!(lo, 0.0);
            prop_assert_eq!(hi, 1.0);
        }
        prop_assert!(m.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn intensity_scale_is_normalized_away(img in raster_strategy(16, 16), ci in 0usize..3) {
        let c = [0.5, 2.0, 10.0][ci];
        let scaled = img.map(|v| v * c);
        let cfg = TensorPoolConfig::default();
        let a = multiscale_tensor(&img, &cfg).unwrap();
        let b = multiscale_tensor(&scaled, &cfg).unwrap();
        prop_assert!(max_abs_diff(&a.map, &b.map) < 1e-5);
        let ta = compute_tensors(&img, 4, 1.5).unwrap();
        let tb = compute_tensors(&scaled, 4, 1.5).unwrap();
        for (ea, eb) in ta.entries().iter().zip(tb.entries()) {
            for (x, y) in ea.data().iter().zip(eb.data()) {
                prop_assert!((x * c * c - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pool_undoes_unpool(img in raster_strategy(5, 7), f in 1usize..4) {
        let up = unpool(&img, f).unwrap();
        prop_assert_eq!(up.dims(), (5 * f, 7 * f));
        if f == 2 {
            prop_assert!(max_abs_diff(&pool(&up, 2).unwrap(), &img) < 1e-15);
        }
    }

    #[test]
    fn coherent_tensor_matches_sort_and_sum(entries in proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, 12), 10), k in 1usize..=10) {
        let rasters: Vec<Raster> = entries.iter().map(|v| Raster::new(3, 4, 1, v.clone()).unwrap()).collect();
        let ts = TensorSet::from_entries(4, rasters).unwrap();
        let mut ranked: Vec<(f64, usize)> = entries
            .iter()
            .enumerate()
            .map(|(i, v)| (v.iter().map(|x| x * x).sum::<f64>().sqrt(), i))
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut want = [0.0; 12];
        for &(_, i) in &ranked[..k] {
            for (w, x) in want.iter_mut().zip(&entries[i]) {
                *w += x.abs();
            }
        }
        let got = coherent_tensor(&ts, k).unwrap();
        for (g, w) in got.data().iter().zip(want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_scan_gives_zero_map_at_full_depth() {
    let cfg = TensorPoolConfig::default();
    let m = multiscale_tensor(&Raster::filled(32, 48, 1, 0.4), &cfg).unwrap();
    assert!(m.map.data().iter().all(|&v| v == 0.0));
    assert_eq!(m.levels_used, cfg.levels);
}

#[test]
fn guard_stops_the_pyramid() {
    let img = Raster::from_fn(6, 4, |r, c| ((r * 5 + c * 3) % 7) as f64 / 7.0);
    let cfg = TensorPoolConfig { levels: 5, ..TensorPoolConfig::default() };
    assert_eq!(multiscale_tensor(&img, &cfg).unwrap().levels_used, 2);
}

#[test]
fn coherent_tensor_rejects_bad_k() {
    let ts = compute_tensors(&Raster::zeros(4, 4, 1), 3, 1.0).unwrap();
    assert!(coherent_tensor(&ts, 0).is_err());
    assert!(coherent_tensor(&ts, 7).is_err());
    assert!(pool(&Raster::zeros(5, 4, 1), 2).is_err());
}
