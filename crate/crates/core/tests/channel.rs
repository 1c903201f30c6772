use hbf_core::channel::*;
use hbf_core::precoding::CMatrix;
use hbf_core::Error;
use num_complex::Complex64;
use proptest::prelude::*;

#[test]
fn broadside_single_ray_is_all_ones() {
    let h = channel_from_rays(8, &[(Complex64::new(1.0, 0.0), 0.0)]);
    assert!(h.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-15));
}

#[test]
fn steering_vector_phases() {
    let a = steering_vector(4, std::f64::consts::FRAC_PI_6);
    // sin(π/6) = 1/2, so consecutive entries advance by π/2.
    assert!((a[1] - Complex64::new(0.0, 1.0)).norm() < 1e-12);
    assert!((a[2] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
}

#[test]
fn average_gain_is_antenna_count() {
    let params = ChannelModelParams::default();
    let batch = generate_batch(&params, 16, 1, 10_000).unwrap();
    let mean = batch.channels.iter().map(|h| h.norm_squared()).sum::<f64>() / batch.len() as f64;
    assert!((mean - 16.0).abs() < 0.05 * 16.0, "E‖h‖² = {mean}");
}

#[test]
fn identical_seeds_give_identical_channels() {
    let params = ChannelModelParams { seed: 42, ..Default::default() };
    let a = generate_channel(&params, 16, 2).unwrap();
    let b = generate_channel(&params, 16, 2).unwrap();
    assert_eq!(a, b);
    let other = generate_channel(&ChannelModelParams { seed: 43, ..params }, 16, 2).unwrap();
    assert_ne!(a, other);
}

#[test]
fn batches_do_not_depend_on_thread_count() {
    let params = ChannelModelParams { seed: 9, ..Default::default() };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate_batch(&params, 8, 2, 64).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn invalid_params() {
    let bad = ChannelModelParams { n_clusters: 0, ..Default::default() };
    assert!(matches!(generate_channel(&bad, 4, 1), Err(Error::Parameter(_))));
    let bad = ChannelModelParams { angle_spread_deg: 0.0, ..Default::default() };
    assert!(matches!(generate_channel(&bad, 4, 1), Err(Error::Parameter(_))));
}

fn fixed_channel() -> CMatrix {
    generate_channel(&ChannelModelParams::default(), 8, 2).unwrap().h
}

#[test]
fn zero_pilot_noise_is_exact_adjoint() {
    let h = fixed_channel();
    let csi = add_pilot_noise(&h, 0.0, 1).unwrap();
    assert_eq!(csi.h_hat, h.adjoint());
    assert!(matches!(add_pilot_noise(&h, -0.1, 1), Err(Error::Parameter(_))));
}

#[test]
fn pilot_noise_variance() {
    let h = fixed_channel();
    let power = 0.3;
    let draws = 10_000;
    let total: f64 = (0..draws)
        .map(|s| (add_pilot_noise(&h, power, s).unwrap().h_hat - h.adjoint()).norm_squared() / 16.0)
        .sum();
    let mean = total / draws as f64;
    assert!((mean - power).abs() < 0.05 * power, "{mean}");
    assert_eq!(add_pilot_noise(&h, power, 5).unwrap(), add_pilot_noise(&h, power, 5).unwrap());
}

#[test]
fn dataset_round_trip() {
    let batch = generate_batch(&ChannelModelParams::default(), 16, 2, 100).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("channels.hbfd");
    write_dataset(&path, &batch).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!((back.n_u, back.n_t, back.len()), (2, 16, 100));
    for (a, b) in batch.channels.iter().zip(&back.channels) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.re as f32 as f64, y.re);
            assert_eq!(x.im as f32 as f64, y.im);
        }
    }
    // A second write of the decoded data is byte-identical.
    assert_eq!(encode_dataset(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn corrupted_and_truncated_files() {
    let batch = generate_batch(&ChannelModelParams::default(), 4, 1, 3).unwrap();
    let mut bytes = encode_dataset(&batch).unwrap();
    assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::Format(_))));
    bytes[4] = 9;
    assert!(matches!(decode_dataset(&bytes), Err(Error::Format(_))));
    bytes[4] = 1;
    bytes[0] = b'X';
    assert!(matches!(decode_dataset(&bytes), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.hbfd");
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    assert!(matches!(read_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn empty_dataset_is_rejected() {
    let empty = ChannelBatch { n_u: 2, n_t: 4, channels: vec![] };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.hbfd");
    assert!(matches!(write_dataset(&path, &empty), Err(Error::Parameter(_))));
    assert!(!path.exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encoded_size_matches_dimensions(n_t in 1usize..12, n_u in 1usize..4, count in 1usize..6, seed in 0u64..100) {
        let params = ChannelModelParams { seed, ..Default::default() };
        let batch = generate_batch(&params, n_t, n_u, count).unwrap();
        let bytes = encode_dataset(&batch).unwrap();
        prop_assert_eq!(bytes.len(), 24 + count * n_t * n_u * 8);
        prop_assert_eq!(decode_dataset(&bytes).unwrap().len(), count);
    }
}
