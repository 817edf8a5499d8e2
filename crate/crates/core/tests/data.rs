use piffuse::data::{
    degrade_lrhsi, extract_patches, read_cube, simulate_hrmsi, synth_scene, write_cube, CubeData, Downsample, PatchConfig,
    SpectralResponse,
};
use piffuse::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn impulse_recovers_kernel_center() {
    let mut z = Tensor::<f64>::zeros(&[8, 8, 1]);
    let o = z.offset(&[4, 4, 0]);
    z.data_mut()[o] = 1.0;
    let x = degrade_lrhsi(&z, 4, Downsample::Decimate).unwrap();
    let g = |d: f64| (-d / 0.5).exp();
    let norm = 1.0 + 4.0 * g(1.0) + 4.0 * g(2.0);
    assert!((x.get(&[1, 1, 0]) - 1.0 / norm).abs() < 1e-15);
    // s = 1 keeps every blurred sample; the edge neighbour gets the side weight.
    let b = degrade_lrhsi(&z, 1, Downsample::Decimate).unwrap();
    assert!((b.get(&[4, 5, 0]) - g(1.0) / norm).abs() < 1e-15);
    assert!((b.get(&[5, 5, 0]) - g(2.0) / norm).abs() < 1e-15);
}

#[test]
fn degradation_is_per_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Tensor::<f64>::rand_uniform(&[16, 16, 5], 0.0, 1.0, &mut rng);
    let full = degrade_lrhsi(&z, 2, Downsample::AreaAverage).unwrap();
    let band = z.narrow_last(3, 1).unwrap();
    let single = degrade_lrhsi(&band, 2, Downsample::AreaAverage).unwrap();
    assert_eq!(full.narrow_last(3, 1).unwrap(), single);
}

#[test]
fn block_average_response_matches_direct_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Tensor::<f64>::rand_uniform(&[4, 4, 32], 0.0, 1.0, &mut rng);
    let y = simulate_hrmsi(&z, &SpectralResponse::block_average(4, 32).unwrap()).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            for g in 0..4 {
                let mean: f64 = (g * 8..g * 8 + 8).map(|b| z.get(&[i, j, b])).sum::<f64>() / 8.0;
                assert!((y.get(&[i, j, g]) - mean).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn samples_regenerate_bit_exactly() {
    let cfg = PatchConfig {
        patch: 16,
        stride: 16,
        scale: 4,
        msi_bands: 3,
        downsample: Downsample::Decimate,
        test_rows: 16,
    };
    let a = extract_patches(&synth_scene(9, 32, 32, 6, 2).unwrap(), &cfg).unwrap();
    let b = extract_patches(&synth_scene(9, 32, 32, 6, 2).unwrap(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
}

#[test]
fn cube_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tensor::<f32>::randn(&[8, 8, 4], 1.0, &mut rng);
    let p = dir.path().join("a.hsc");
    write_cube(&p, &t).unwrap();
    assert_eq!(read_cube(&p).unwrap(), CubeData::F32(t));
}
