use odorwatch_core::ensemble::{ForestParams, Task, Variant};
use odorwatch_core::interpret::{dbscan_by, largest_cluster, point_biserial, rfe, unsupervised_proximity, NOISE};
use odorwatch_core::matrix::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relabels clusters by their smallest member so partitions compare equal.
fn canonical(labels: &[i32]) -> Vec<i32> {
    let mut map = std::collections::HashMap::new();
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            if l == NOISE {
                NOISE
            } else {
                *map.entry(l).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn dbscan_is_permutation_invariant(
        pts in proptest::collection::vec((0u32..1000, 0u32..1000), 3..40),
        eps_k in 1u32..20,
        mp in 1usize..5,
        seed in any::<u64>(),
    ) {
        // irrational-ish coordinates keep pairwise distances tie-free
        let p: Vec<(f64, f64)> = pts.iter().map(|&(a, b)| (a as f64 * 0.013 + (b as f64).sqrt() * 1e-4, b as f64 * 0.011 + (a as f64).sqrt() * 1e-4)).collect();
        let d = |p: &[(f64, f64)], i: usize, j: usize| ((p[i].0 - p[j].0).powi(2) + (p[i].1 - p[j].1).powi(2)).sqrt();
        let eps = eps_k as f64 * 0.1;
        let Ok(base) = dbscan_by(p.len(), |i, j| d(&p, i, j), eps, mp) else { return Ok(()) };
        let mut perm: Vec<usize> = (0..p.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let q: Vec<(f64, f64)> = perm.iter().map(|&i| p[i]).collect();
        let shuffled = dbscan_by(q.len(), |i, j| d(&q, i, j), eps, mp).unwrap();
        let mut back = vec![0; p.len()];
        for (k, &i) in perm.iter().enumerate() {
            back[i] = shuffled[k];
        }
        prop_assert_eq!(canonical(&back), canonical(&base));
    }

    #[test]
    fn point_biserial_is_bounded(x in proptest::collection::vec(-5.0f64..5.0, 3..50), flips in proptest::collection::vec(any::<bool>(), 50)) {
        let label: Vec<bool> = flips[..x.len()].to_vec();
        let (r, p) = point_biserial(&x, &label);
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((0.0..=1.0).contains(&p));
    }
}

fn two_blobs(n: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = if i < n / 2 { -3.0 } else { 3.0 };
            (0..4).map(|_| c + rng.random::<f64>() * 0.5).collect()
        })
        .collect();
    Matrix::from_rows(&rows)
}

#[test]
fn proximity_is_symmetric_and_separates_blobs() {
    let x = two_blobs(40);
    let p = unsupervised_proximity(&x, 100, 1).unwrap();
    let (mut within, mut across, mut nw, mut na) = (0.0, 0.0, 0, 0);
    for i in 0..40 {
        assert_eq!(p.similarity(i, i), 1.0);
        for j in 0..40 {
            assert_eq!(p.similarity(i, j), p.similarity(j, i));
            assert!((0.0..=1.0).contains(&p.similarity(i, j)));
            assert!((p.distance(i, j) - (1.0 - p.similarity(i, j))).abs() < 1e-15);
            if i != j {
                if (i < 20) == (j < 20) {
                    within += p.similarity(i, j);
                    nw += 1;
                } else {
                    across += p.similarity(i, j);
                    na += 1;
                }
            }
        }
    }
    assert!(within / nw as f64 > 2.0 * across / na as f64);
}

#[test]
fn largest_cluster_prefers_lower_label_on_ties() {
    assert_eq!(largest_cluster(&[1, 0, 1, 0, NOISE]), vec![1, 3]);
    assert_eq!(largest_cluster(&[2, 2, 0, NOISE]), vec![0, 1]);
}

#[test]
fn rfe_keeps_the_target_count_and_the_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 300;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..60).map(|_| rng.random::<f64>()).collect()).collect();
    let y: Vec<u32> = rows.iter().map(|r| (r[17] > 0.5) as u32).collect();
    let x = Matrix::from_rows(&rows);
    let params = ForestParams {
        n_trees: 50,
        seed: 1,
        ..ForestParams::new(Variant::RandomForest, Task::Classification)
    };
    let res = rfe(&x, &y, 20, 7, &params).unwrap();
    assert_eq!(res.selected.len(), 7);
    assert_eq!(res.selected[0], 17);
    let mut uniq = res.selected.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), 7);
    assert_eq!(res.rounds, vec![60, 40, 20]);
}

#[test]
fn point_biserial_near_zero_on_independent_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
    let l: Vec<bool> = (0..5000).map(|_| rng.random_bool(0.3)).collect();
    let (r, p) = point_biserial(&x, &l);
    assert!(r.abs() < 0.1, "r {r}");
    assert!(p > 0.001);
}
