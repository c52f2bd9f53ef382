use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsegan::aam::{activation_map, anomaly_vector, upsample, Upsample};
use sparsegan::Tensor;

fn latents(seed: u64, c: usize, s: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::randn(&[1, c, s, s], 1.0, &mut rng),
        Tensor::randn(&[1, c, s, s], 1.0, &mut rng),
    )
}

fn scaled(t: &Tensor<f32>, k: f32) -> Tensor<f32> {
    Tensor::new(t.shape(), t.data().iter().map(|v| v * k).collect()).unwrap()
}

fn mode() -> impl Strategy<Value = Upsample> {
    prop_oneof![Just(Upsample::Bilinear), Just(Upsample::Nearest)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heat_is_in_unit_interval(seed in any::<u64>(), c in 1usize..8, s in 1usize..5, m in mode()) {
        let (a, b) = latents(seed, c, s);
        let w = anomaly_vector(&a, &b).unwrap();
        let map = activation_map(&a, &w, 8 * s, m).unwrap();
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(map.values.len(), 64 * s * s);
    }

    /// Scaling both latents by `k > 0` scales the raw map by `k^2`, which
    /// normalization removes.
    #[test]
    fn maps_ignore_latent_scale(seed in any::<u64>(), c in 1usize..8, s in 1usize..5, k in 0.05f32..20.0, m in mode()) {
        let (a, b) = latents(seed, c, s);
        let base = activation_map(&a, &anomaly_vector(&a, &b).unwrap(), 4 * s, m).unwrap();
        let (ak, bk) = (scaled(&a, k), scaled(&b, k));
        let moved = activation_map(&ak, &anomaly_vector(&ak, &bk).unwrap(), 4 * s, m).unwrap();
        for (x, y) in base.values.iter().zip(&moved.values) {
            prop_assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn upsampling_a_constant_is_constant(v in -5.0f64..5.0, h in 1usize..5, m in mode()) {
        let out = upsample(&vec![v; h * h], h, h, 3 * h, m);
        prop_assert!(out.iter().all(|&o| (o - v).abs() < 1e-12));
    }

    #[test]
    fn bilinear_stays_within_grid_range(seed in any::<u64>(), h in 1usize..6) {
        let (a, _) = latents(seed, 1, h);
        let grid: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
        let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for o in upsample(&grid, h, h, 4 * h, Upsample::Bilinear) {
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }
}

#[test]
fn power_of_two_scale_is_exact() {
    let (a, b) = latents(5, 6, 2);
    let base = activation_map(&a, &anomaly_vector(&a, &b).unwrap(), 64, Upsample::Bilinear).unwrap();
    let (a4, b4) = (scaled(&a, 4.0), scaled(&b, 4.0));
    let moved = activation_map(&a4, &anomaly_vector(&a4, &b4).unwrap(), 64, Upsample::Bilinear).unwrap();
    assert_eq!(base.values, moved.values);
}

#[test]
fn heat_follows_the_differing_channel() {
    // Channel 1 carries a spot in the corner and is the only one that changes.
    let mut a = vec![0.0f32; 2 * 4 * 4];
    a[..16].fill(1.0);
    a[16] = 3.0;
    let mut b = a.clone();
    b[16] = 0.0;
    let a = Tensor::new(&[1, 2, 4, 4], a).unwrap();
    let b = Tensor::new(&[1, 2, 4, 4], b).unwrap();
    let w = anomaly_vector(&a, &b).unwrap();
    assert_eq!(w.weights[0], 0.0);
    let map = activation_map(&a, &w, 16, Upsample::Nearest).unwrap();
    assert_eq!(map.values[0], 1.0);
    assert_eq!(map.values[16 * 16 - 1], 0.0);
}
