use nowcast_wasm::{cutmix_demo, power_iteration_trace, GeneratorDemo, DEMO_HEIGHT, DEMO_WIDTH};

#[test]
fn cutmix_view_is_consistent_with_its_mask() {
    let (h, w) = (12, 20);
    let v = cutmix_demo(h, w, 5);
    let (real, fake, mask, comp) = (v.real(), v.fake(), v.mask(), v.composite());
    for buf in [&real, &fake, &mask, &comp] {
        assert_eq!(buf.len(), h * w * 4);
    }
    let mut white = 0;
    for p in 0..h * w {
        let px = |b: &[u8]| b[4 * p..4 * p + 4].to_vec();
        if mask[4 * p] == 255 {
            white += 1;
            assert_eq!(px(&comp), px(&real));
        } else {
            assert_eq!(mask[4 * p], 0);
            assert_eq!(px(&comp), px(&fake));
        }
    }
    assert!((v.real_fraction() - white as f64 / (h * w) as f64).abs() < 1e-12);
}

#[test]
fn power_iteration_estimates_increase_to_the_reference() {
    let trace = power_iteration_trace(8, 20, 40, 2);
    assert_eq!(trace.len(), 41);
    let reference = *trace.last().unwrap();
    for pair in trace[..40].windows(2) {
        assert!(pair[1] >= pair[0] - 1e-12);
    }
    assert!(trace[39] <= reference + 1e-12);
    assert!((trace[39] - reference).abs() / reference < 0.05);
}

#[test]
fn generator_samples_scale_with_sigma() {
    let demo = GeneratorDemo::new(3).unwrap();
    let strip = demo.samples(0.5, 4, 1).unwrap();
    assert_eq!(strip.len(), 4 * DEMO_WIDTH * DEMO_HEIGHT * 4);
    assert_eq!(demo.scene().len(), DEMO_WIDTH * DEMO_HEIGHT * 4);
    assert_eq!(demo.spread(0.0, 4, 1).unwrap(), 0.0);
    let small = demo.spread(0.2, 8, 1).unwrap();
    let large = demo.spread(1.5, 8, 1).unwrap();
    assert!(large > small && small > 0.0, "{small} {large}");
    assert_eq!(demo.samples(0.7, 2, 9).unwrap(), demo.samples(0.7, 2, 9).unwrap());
}
