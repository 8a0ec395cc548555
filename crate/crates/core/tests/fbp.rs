use dewedge_core::*;

fn phantom() -> Volume<f64> {
    make_phantom::<f64>(&PhantomConfig::default(), 21).unwrap().0
}

fn noiseless(v: &Volume<f64>, scheme: &TiltScheme) -> TiltSeries<f64> {
    let noise = NoiseConfig {
        target_snr: f64::INFINITY,
        ..Default::default()
    };
    simulate_tilt_series(v, scheme, &noise, 0).unwrap()
}

#[test]
fn full_range_reconstruction_matches_the_phantom() {
    let v = phantom();
    let t = noiseless(&v, &TiltScheme::new(-90.0, 90.0, 1.0));
    let r = fbp(&t, FilterKind::Ramp, v.shape()).unwrap();
    let c = cc(&r, &v).unwrap();
    assert!(c >= 0.95, "cc {c}");
    let h = fbp(&t, FilterKind::Hamming, v.shape()).unwrap();
    assert!(cc(&h, &v).unwrap() >= 0.9);
}

#[test]
fn limited_range_keeps_the_measured_region() {
    let v = phantom();
    let t = noiseless(&v, &TiltScheme::new(-60.0, 60.0, 2.0));
    let r = fbp(&t, FilterKind::Ramp, v.shape()).unwrap();
    let m = wedge_mask(v.shape(), 60.0, EulerAngles::IDENTITY).unwrap();
    let outside = masked_cc(&r, &v, &m).unwrap();
    let inside = masked_cc(&r, &v, &m.complement()).unwrap();
    assert!(outside > 0.95, "outside {outside}");
    assert!(inside < outside - 0.3, "inside {inside}");
}

#[test]
fn reconstruction_is_linear_in_the_data() {
    let v = phantom();
    let scheme = TiltScheme::new(-60.0, 60.0, 10.0);
    let t = noiseless(&v, &scheme);
    let doubled = noiseless(&v.scaled(2.0), &scheme);
    let s = Shape3::new(32, 64, 48);
    let a = fbp(&t, FilterKind::Ramp, s).unwrap();
    let b = fbp(&doubled, FilterKind::Ramp, s).unwrap();
    assert_eq!(a.shape(), s);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((2.0 * x - y).abs() < 1e-9 * (1.0 + y.abs()));
    }
}
