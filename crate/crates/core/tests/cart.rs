use odorwatch_core::ensemble::{fit_tree, gini, tree_rng, Target, Tree, TreeParams};
use odorwatch_core::matrix::Matrix;
use proptest::prelude::*;

/// Sum over leaves of weight times Gini, recomputed from the rows that land
/// in each leaf rather than from stored node statistics.
fn training_loss(tree: &Tree, x: &Matrix, y: &[u32]) -> f64 {
    let mut by_leaf: std::collections::HashMap<usize, [f64; 3]> = Default::default();
    for r in 0..x.n_rows() {
        by_leaf.entry(tree.leaf_index(x.row(r))).or_default()[y[r] as usize] += 1.0;
    }
    by_leaf.values().map(|c| oracle_gini(c) * c.iter().sum::<f64>()).sum()
}

fn oracle_gini(c: &[f64]) -> f64 {
    let n: f64 = c.iter().sum();
    if n == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for a in c {
        for b in c {
            s += a * b;
        }
    }
    // probability two draws with replacement differ
    let same: f64 = c.iter().map(|v| v * v).sum();
    (s - same) / (n * n)
}

/// Best depth-1 split by trying every threshold on every feature.
fn stump_loss(x: &Matrix, y: &[u32]) -> f64 {
    let mut all = [0.0; 3];
    for &c in y {
        all[c as usize] += 1.0;
    }
    let mut best = oracle_gini(&all) * y.len() as f64;
    for f in 0..x.n_cols() {
        let col = x.column(f);
        for &t in &col {
            let (mut l, mut r) = ([0.0; 3], [0.0; 3]);
            for (i, &v) in col.iter().enumerate() {
                if v <= t {
                    l[y[i] as usize] += 1.0
                } else {
                    r[y[i] as usize] += 1.0
                }
            }
            let loss = oracle_gini(&l) * l.iter().sum::<f64>() + oracle_gini(&r) * r.iter().sum::<f64>();
            best = best.min(loss);
        }
    }
    best
}

fn dataset() -> impl Strategy<Value = (Matrix, Vec<u32>)> {
    (2usize..=50, 1usize..=4, 2u32..=3).prop_flat_map(|(n, p, k)| {
        (
            proptest::collection::vec(proptest::collection::vec((0i32..8).prop_map(|v| v as f64 * 0.5), p), n),
            proptest::collection::vec(0..k, n),
        )
            .prop_map(|(rows, y)| (Matrix::from_rows(&rows), y))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cart_never_worse_than_best_stump((x, y) in dataset(), depth in prop_oneof![Just(Some(1)), Just(Some(3)), Just(None)]) {
        let tree = fit_tree(&x, Target::Classes(&y), None, &TreeParams::cart(depth), &mut tree_rng(0, 0)).unwrap();
        let stump = stump_loss(&x, &y);
        prop_assert!(training_loss(&tree, &x, &y) <= stump + 1e-9, "tree {} stump {}", training_loss(&tree, &x, &y), stump);
        if let Some(d) = depth {
            prop_assert!(tree.depth() <= d);
        }
    }

    #[test]
    fn gini_matches_pairwise_definition(c in proptest::collection::vec(0.0f64..20.0, 1..5)) {
        prop_assert!((gini(&c) - oracle_gini(&c)).abs() < 1e-12);
    }
}

#[test]
fn gini_identities() {
    assert!(gini(&[7.0, 0.0]).abs() < 1e-12);
    assert!((gini(&[3.0, 3.0]) - 0.5).abs() < 1e-12);
    assert!(gini(&[0.0, 0.0]).abs() < 1e-12);
}

#[test]
fn unlimited_tree_separates_distinct_rows() {
    let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
    let y = [0, 1, 0, 1];
    let t = fit_tree(
        &x,
        Target::Classes(&y),
        None,
        &TreeParams::cart(None),
        &mut tree_rng(0, 0),
    )
    .unwrap();
    assert_eq!(training_loss(&t, &x, &y), 0.0);
}
