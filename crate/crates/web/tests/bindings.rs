use covt_web::{feature_maps, field_map, lr_curve, probe_size};

fn support(map: &[f64], n: usize) -> (usize, usize) {
    let (mut rows, mut cols) = ((n, 0), (n, 0));
    for (i, &v) in map.iter().enumerate() {
        if v > 0.0 {
            rows = (rows.0.min(i / n), rows.1.max(i / n));
            cols = (cols.0.min(i % n), cols.1.max(i % n));
        }
    }
    (rows.1 - rows.0 + 1, cols.1 - cols.0 + 1)
}

#[test]
fn field_maps_have_analytic_extent() {
    let n = probe_size(1);
    for (b, edge) in [9, 11, 13, 15].into_iter().enumerate() {
        let map = field_map(1, b).unwrap();
        assert_eq!(map.len(), n * n);
        assert_eq!(support(&map, n), (edge, edge));
        assert_eq!(map.iter().cloned().fold(0.0, f64::max), 1.0);
    }
    assert!(field_map(1, 4).is_err());
}

#[test]
fn feature_maps_layout() {
    let maps = feature_maps(1, 2, 32, 2, 0).unwrap();
    assert_eq!(maps.len(), 32 * 32 + 4 * 16 * 16);
    assert!(maps.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(maps, feature_maps(0, 2, 32, 2, 0).unwrap());
    assert!(feature_maps(2, 2, 32, 2, 0).is_err());
}

#[test]
fn lr_curve_endpoints() {
    let c = lr_curve(0.1, 1e-5, 1000, 0, 50).unwrap();
    assert_eq!((c.len(), c[0], c[49]), (50, 0.1, 1e-5));
    assert!(c.windows(2).all(|w| w[1] <= w[0]));
    assert!(lr_curve(1e-5, 0.1, 10, 0, 5).is_err());
}
