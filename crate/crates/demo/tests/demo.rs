use vibcorr_demo::{bath_curves_impl, detection_trace_impl, vibronic_levels_impl};

#[test]
fn bath_curves_layout_and_values() {
    let n = 41;
    let v = bath_curves_impl(5.0, 200.0, 298.0, 2, 400.0, 100.0, n).unwrap();
    assert_eq!(v.len(), 3 * n);
    assert_eq!(v[0], 0.0);
    // J(Λ) = η, at ω = 200 = 400 · 20/40
    assert!((v[20] - 5.0).abs() < 1e-12);
    // Im C(0) = −ηΛ from the Drude term alone
    assert!((v[2 * n] + 1000.0).abs() < 1e-9);
    assert!(v[n] > 0.0 && v[n] > v[2 * n - 1]);
}

#[test]
fn levels_without_displacement_are_a_ladder() {
    let v = vibronic_levels_impl(10000.0, 500.0, 0.0, 4, 298.0).unwrap();
    let (e, p) = v.split_at(8);
    // zero-point ω₀/2 included on both manifolds
    for (k, want) in [250.0, 750.0, 1250.0, 1750.0, 10250.0, 10750.0, 11250.0, 11750.0].iter().enumerate() {
        assert!((e[k] - want).abs() < 1e-9, "{k}: {}", e[k]);
    }
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    assert!((p[1] / p[0] - 0.08945).abs() < 5e-4);
}

#[test]
fn detection_trace_starts_dark_and_stays_bounded() {
    let v = detection_trace_impl(500.0, 1.2, 16.68, 4, 298.0, 0.2).unwrap();
    assert_eq!(v.len(), 2 * 201);
    assert!(v[0].abs() < 1e-12);
    assert!(v.iter().all(|x| (-1e-12..=4.0).contains(x)));
    assert!(v[200] > v[0]);
}

#[test]
fn demo_limits_are_enforced() {
    assert!(detection_trace_impl(500.0, 1.2, 16.68, 9, 298.0, 0.2).is_err());
    assert!(detection_trace_impl(500.0, 1.2, 16.68, 4, 298.0, 5.0).is_err());
    assert!(vibronic_levels_impl(10000.0, -1.0, 0.0, 4, 298.0).is_err());
}
