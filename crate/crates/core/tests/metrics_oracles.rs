mod common;

use common::*;
use meddino::metrics::{cossim_map, dsc, nsd, nsd_binary, pca_map};
use meddino::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dsc_is_symmetric_and_matches_oracle(seed in any::<u64>(), h in 1usize..=12, w in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_labels(h, w, 3, &mut rng);
        let b = random_labels(h, w, 3, &mut rng);
        for c in 0..3 {
            let v = dsc(&a, &b, c).unwrap();
            prop_assert_eq!(v, dsc(&b, &a, c).unwrap());
            prop_assert_eq!(v, dsc_oracle(&a, &b, c));
        }
    }

    #[test]
    fn dsc_invariant_to_joint_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_labels(7, 9, 3, &mut rng);
        let b = random_labels(7, 9, 3, &mut rng);
        let mut perm: Vec<usize> = (0..63).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pa: Vec<u8> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<u8> = perm.iter().map(|&i| b[i]).collect();
        for c in 0..3 {
            prop_assert_eq!(dsc(&a, &b, c).unwrap(), dsc(&pa, &pb, c).unwrap());
        }
    }

    #[test]
    fn nsd_matches_all_pairs_oracle(
        seed in any::<u64>(),
        h in 1usize..=12,
        w in 1usize..=12,
        sy in 0.3f64..2.0,
        sx in 0.3f64..2.0,
        tau in 0.1f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<bool> = random_labels(h, w, 2, &mut rng).into_iter().map(|v| v == 1).collect();
        let b: Vec<bool> = random_labels(h, w, 2, &mut rng).into_iter().map(|v| v == 1).collect();
        let (v, _) = nsd_binary(&a, &b, h, w, (sy, sx), tau).unwrap();
        prop_assert!((v - nsd_oracle(&a, &b, h, w, (sy, sx), tau)).abs() < 1e-9);
        let (u, _) = nsd_binary(&b, &a, h, w, (sy, sx), tau).unwrap();
        prop_assert!((v - u).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn cossim_stays_in_range(seed in any::<u64>(), p in 1usize..20, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f: Vec<f64> = (0..p * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in 0..p {
            let row = &mut f[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-3 {
                row.fill(0.0);
                row[0] = 1.0;
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let t = Tensor::new(vec![p, d], f).unwrap();
        let m = cossim_map(&t, (p, 1), rng.random_range(0..p)).unwrap();
        prop_assert!(m.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn nsd_on_integer_grid_ties() {
    // distances that land exactly on tau count as within tolerance
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let a: Vec<bool> = random_labels(8, 8, 2, &mut rng).into_iter().map(|v| v == 1).collect();
        let b: Vec<bool> = random_labels(8, 8, 2, &mut rng).into_iter().map(|v| v == 1).collect();
        for tau in [1.0, 2.0, 3.0] {
            let (v, _) = nsd_binary(&a, &b, 8, 8, (1.0, 1.0), tau).unwrap();
            assert_eq!(v, nsd_oracle(&a, &b, 8, 8, (1.0, 1.0), tau));
        }
    }
}

#[test]
fn nsd_saturates_beyond_the_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_labels(10, 10, 2, &mut rng);
    let mut b = random_labels(10, 10, 2, &mut rng);
    b[0] = 1;
    let mut a = a;
    a[99] = 1;
    assert_eq!(nsd(&a, &b, 1, 10, 10, (1.0, 1.0), 15.0).unwrap(), 1.0);
}

fn six_patch_features(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..6 * d).map(|i| rng.random_range(-1.0..1.0) * (1.0 + (i % d) as f64)).collect()
}

#[test]
fn pca_matches_power_iteration_oracle() {
    let d = 5;
    let fg = [true, true, false, true, true, true];
    for seed in 0..20 {
        let f = six_patch_features(seed, d);
        let map = pca_map(&Tensor::new(vec![6, d], f.clone()).unwrap(), (2, 3), &fg).unwrap();
        assert!(same_up_to_sign(&map.data, &pca_oracle(&f, 6, d, &fg), &fg), "seed {seed}");
    }
}

#[test]
fn pca_is_rotation_invariant_up_to_sign() {
    let d = 4;
    let fg = [true; 6];
    for seed in 0..20 {
        let f = six_patch_features(seed, d);
        let r = random_orthogonal(d, 100 + seed);
        let rotated = matmul(&f, &r, 6, d, d);
        let a = pca_map(&Tensor::new(vec![6, d], f).unwrap(), (3, 2), &fg).unwrap();
        let b = pca_map(&Tensor::new(vec![6, d], rotated).unwrap(), (3, 2), &fg).unwrap();
        assert!(same_up_to_sign(&a.data, &b.data, &fg), "seed {seed}");
    }
}

#[test]
fn pca_is_permutation_equivariant() {
    let d = 4;
    let fg = [true, false, true, true, true, true, false, true];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f: Vec<f64> = (0..8 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
    let pf: Vec<f64> = perm.iter().flat_map(|&i| f[i * d..(i + 1) * d].to_vec()).collect();
    let pfg: Vec<bool> = perm.iter().map(|&i| fg[i]).collect();
    let a = pca_map(&Tensor::new(vec![8, d], f).unwrap(), (2, 4), &fg).unwrap();
    let b = pca_map(&Tensor::new(vec![8, d], pf).unwrap(), (2, 4), &pfg).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(b.data[k * 3..k * 3 + 3], a.data[i * 3..i * 3 + 3]);
    }
}
