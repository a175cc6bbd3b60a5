//! Interpretation pipeline: hand-picked wind and H2S features with their
//! pairwise interactions, unsupervised forest proximity between positive
//! samples, DBSCAN to pick a representative cluster, recursive feature
//! elimination and a shallow CART tree that is easy to read.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::dataset::{
    build_raw_design, ColumnDescriptor, DatasetError, FeatureMatrix, FeatureParams, FrameChannel, FrameLayout,
    RawMatrix, SensorFrame, MIN_STD,
};
use crate::domain::LocalCalendar;
use crate::ensemble::{
    fit_forest, tree_rng, EnsembleError, ForestParams, MaxFeatures, Splitter, Target, Task, Tree, TreeParams,
    TreeTrainer, Variant,
};
use crate::matrix::Matrix;

/// Channels used for interpretation.
pub const BASE_CHANNELS: [FrameChannel; 5] = [
    FrameChannel::H2s,
    FrameChannel::WindCos,
    FrameChannel::WindSin,
    FrameChannel::WindSpeed,
    FrameChannel::WindDirStd,
];
pub const MAX_LAG: u8 = 2;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("no cluster found; widen eps")]
    NoCluster,
    #[error("need at least {need} positive samples, got {got}")]
    TooFewPositives { need: usize, got: usize },
    #[error("no interpretation base channel present in the design")]
    NoBaseColumns,
    #[error("rfe: {have} features but target is {target}")]
    TooFewFeatures { have: usize, target: usize },
    #[error("label count {labels} differs from row count {rows}")]
    LabelCount { rows: usize, labels: usize },
    #[error("invalid interpretation parameter: {0}")]
    Params(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] EnsembleError),
}

// ---------------------------------------------------------------- features

/// Base columns (the interpretation channels at lags 0..=2) followed by every
/// unordered pairwise product between distinct base columns. Missing base
/// cells are mean-imputed before multiplying, so products stay on raw units.
pub fn interpretation_design(design: &RawMatrix) -> Result<RawMatrix, InterpretError> {
    let base: Vec<usize> = design
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            c.sensor()
                .is_some_and(|(_, ch, lag)| BASE_CHANNELS.contains(&ch) && lag <= MAX_LAG)
        })
        .map(|(i, _)| i)
        .collect();
    if base.is_empty() {
        return Err(InterpretError::NoBaseColumns);
    }
    let n = design.n_rows();
    let k = base.len();
    let means: Vec<f64> = base
        .iter()
        .map(|&c| {
            let obs: Vec<f64> = (0..n).filter_map(|r| design.get(r, c)).collect();
            if obs.is_empty() {
                0.0
            } else {
                obs.iter().sum::<f64>() / obs.len() as f64
            }
        })
        .collect();
    let mut columns: Vec<ColumnDescriptor> = base.iter().map(|&c| design.columns[c].clone()).collect();
    for a in 0..k {
        for b in a + 1..k {
            columns.push(ColumnDescriptor::Product(
                Box::new(columns[a].clone()),
                Box::new(columns[b].clone()),
            ));
        }
    }
    let width = k + k * (k - 1) / 2;
    let mut values = Vec::with_capacity(n * width);
    let mut row = vec![0.0; k];
    for r in 0..n {
        for (j, &c) in base.iter().enumerate() {
            row[j] = design.get(r, c).unwrap_or(means[j]);
        }
        values.extend(row.iter().map(|&v| Some(v)));
        for a in 0..k {
            for b in a + 1..k {
                values.push(Some(row[a] * row[b]));
            }
        }
    }
    log::info!(
        "interpretation features: {k} base + {} interactions = {width}",
        width - k
    );
    Ok(RawMatrix::new(design.hours.clone(), columns, values))
}

/// Interpretation features straight from contiguous hourly frames.
pub fn build_interpretation_features(
    frames: &[SensorFrame],
    layout: &FrameLayout,
    calendar: &LocalCalendar,
) -> Result<FeatureMatrix, InterpretError> {
    let params = FeatureParams {
        lags: MAX_LAG as usize,
        calendar: false,
    };
    let design = build_raw_design(frames, layout, calendar, params)?;
    Ok(FeatureMatrix::from_raw(&interpretation_design(&design)?))
}

// ---------------------------------------------------------------- proximity

/// Pairwise similarity in [0, 1]; distance is `1 - s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityMatrix {
    n: usize,
    sim: Vec<f64>,
}

impl ProximityMatrix {
    /// From a full row-major similarity matrix.
    pub fn from_similarity(n: usize, sim: Vec<f64>) -> Self {
        assert_eq!(sim.len(), n * n, "similarity shape");
        Self { n, sim }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.sim[i * self.n + j]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        1.0 - self.similarity(i, j)
    }
}

/// Per-column independent resampling with replacement: keeps each marginal
/// and destroys the joint structure.
pub fn synthetic_contrast(x: &Matrix, rng: &mut impl Rng) -> Matrix {
    let (n, p) = (x.n_rows(), x.n_cols());
    let mut m = Matrix::zeros(n, p);
    for c in 0..p {
        for r in 0..n {
            m.set(r, c, x.get(rng.random_range(0..n), c));
        }
    }
    m
}

/// Unsupervised forest proximity: a forest learns original vs synthetic
/// rows, and two original rows are similar in proportion to the trees that
/// put them in the same leaf.
pub fn unsupervised_proximity(x: &Matrix, n_trees: usize, seed: u64) -> Result<ProximityMatrix, InterpretError> {
    let n = x.n_rows();
    if n < 2 {
        return Err(InterpretError::TooFewPositives { need: 2, got: n });
    }
    let mut rng = tree_rng(seed, u64::MAX);
    let synth = synthetic_contrast(x, &mut rng);
    let mut rows: Vec<Vec<f64>> = (0..n).map(|r| x.row(r).to_vec()).collect();
    rows.extend((0..n).map(|r| synth.row(r).to_vec()));
    let both = Matrix::from_rows(&rows);
    let y: Vec<u32> = (0..2 * n).map(|i| u32::from(i < n)).collect();
    let mut params = ForestParams::new(Variant::RandomForest, Task::Classification);
    params.n_trees = n_trees;
    params.seed = seed;
    let model = fit_forest(&both, Target::Classes(&y), &params, "proximity")?;

    // co-leaf counts over the original rows, upper triangle only
    let counts = model
        .trees
        .par_iter()
        .fold(
            || vec![0u32; n * n],
            |mut acc, tree| {
                let mut by_leaf: Vec<(usize, usize)> = (0..n).map(|r| (tree.leaf_index(x.row(r)), r)).collect();
                by_leaf.sort_unstable();
                let mut s = 0;
                while s < n {
                    let mut e = s + 1;
                    while e < n && by_leaf[e].0 == by_leaf[s].0 {
                        e += 1;
                    }
                    for a in s..e {
                        let i = by_leaf[a].1;
                        for b in &by_leaf[a + 1..e] {
                            let j = b.1;
                            let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                            acc[lo * n + hi] += 1;
                        }
                    }
                    s = e;
                }
                acc
            },
        )
        .reduce(
            || vec![0u32; n * n],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let t = n_trees as f64;
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        sim[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = f64::from(counts[i * n + j]) / t;
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    Ok(ProximityMatrix { n, sim })
}

// ---------------------------------------------------------------- dbscan

pub const NOISE: i32 = -1;

/// DBSCAN over an arbitrary symmetric distance. A point is core when at
/// least `min_pts` points (itself included) lie within `eps`. Clusters are
/// the connected components of core points; a border point joins the
/// cluster of its nearest core neighbour, which keeps the result free of
/// visiting order. Labels are numbered by each cluster's smallest member.
pub fn dbscan_by(
    n: usize,
    dist: impl Fn(usize, usize) -> f64,
    eps: f64,
    min_pts: usize,
) -> Result<Vec<i32>, InterpretError> {
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts.max(1)).collect();
    let mut labels = vec![NOISE; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || labels[start] != NOISE {
            continue;
        }
        labels[start] = next;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &j in &neighbours[i] {
                if core[j] && labels[j] == NOISE {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    if next == 0 {
        return Err(InterpretError::NoCluster);
    }
    let border: Vec<(usize, i32)> = (0..n)
        .filter(|&i| !core[i])
        .filter_map(|i| {
            neighbours[i]
                .iter()
                .filter(|&&j| core[j])
                .min_by(|&&a, &&b| dist(i, a).total_cmp(&dist(i, b)))
                .map(|&j| (i, labels[j]))
        })
        .collect();
    for (i, l) in border {
        labels[i] = l;
    }
    // core numbering already follows the smallest core member; renumber so a
    // border point with a smaller index does not break the convention
    let mut first: BTreeMap<i32, usize> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != NOISE {
            first.entry(l).or_insert(i);
        }
    }
    let mut order: Vec<(usize, i32)> = first.into_iter().map(|(l, i)| (i, l)).collect();
    order.sort_unstable();
    let remap: BTreeMap<i32, i32> = order.iter().enumerate().map(|(k, &(_, l))| (l, k as i32)).collect();
    Ok(labels
        .into_iter()
        .map(|l| if l == NOISE { NOISE } else { remap[&l] })
        .collect())
}

pub fn dbscan(p: &ProximityMatrix, eps: f64, min_pts: usize) -> Result<Vec<i32>, InterpretError> {
    dbscan_by(p.len(), |i, j| p.distance(i, j), eps, min_pts)
}

/// Members of the largest cluster; ties go to the lower label.
pub fn largest_cluster(labels: &[i32]) -> Vec<usize> {
    let mut sizes: BTreeMap<i32, usize> = BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l != NOISE) {
        *sizes.entry(l).or_default() += 1;
    }
    let Some(best) = sizes
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(l, _)| *l)
    else {
        return Vec::new();
    };
    (0..labels.len()).filter(|&i| labels[i] == best).collect()
}

// ---------------------------------------------------------------- rfe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeResult {
    /// Column indices into the input, most important first.
    pub selected: Vec<usize>,
    /// Feature count before each elimination round.
    pub rounds: Vec<usize>,
}

/// Recursive feature elimination: fit a forest, drop the `step` least
/// important remaining features (fewer on the last round so exactly
/// `target` remain), repeat. Importance ties drop the later column.
pub fn rfe(
    x: &Matrix,
    y: &[u32],
    step: usize,
    target: usize,
    params: &ForestParams,
) -> Result<RfeResult, InterpretError> {
    if step == 0 || target == 0 {
        return Err(InterpretError::Params("rfe step and target must be positive".into()));
    }
    let p = x.n_cols();
    if p < target {
        return Err(InterpretError::TooFewFeatures { have: p, target });
    }
    let mut keep: Vec<usize> = (0..p).collect();
    let mut rounds = Vec::new();
    let mut last_importance: Option<Vec<f64>> = None;
    while keep.len() > target {
        rounds.push(keep.len());
        let sub = x.select_cols(&keep);
        let model = fit_forest(&sub, Target::Classes(y), params, "rfe")?;
        let imp = model.feature_importance();
        let drop = step.min(keep.len() - target);
        let mut order: Vec<usize> = (0..keep.len()).collect();
        order.sort_by(|&a, &b| imp[a].total_cmp(&imp[b]).then(b.cmp(&a)));
        let gone: HashSet<usize> = order[..drop].iter().copied().collect();
        let (kept, kept_imp): (Vec<usize>, Vec<f64>) = (0..keep.len())
            .filter(|i| !gone.contains(i))
            .map(|i| (keep[i], imp[i]))
            .unzip();
        keep = kept;
        last_importance = Some(kept_imp);
    }
    if let Some(imp) = last_importance {
        let mut idx: Vec<usize> = (0..keep.len()).collect();
        idx.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(keep[a].cmp(&keep[b])));
        keep = idx.into_iter().map(|i| keep[i]).collect();
    }
    Ok(RfeResult { selected: keep, rounds })
}

// ---------------------------------------------------------------- correlation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub feature: String,
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Point-biserial correlation (Pearson r against a 0/1 label) with a
/// two-sided t-test p-value on n - 2 degrees of freedom.
pub fn point_biserial(x: &[f64], label: &[bool]) -> (f64, f64) {
    let n = x.len().min(label.len());
    if n < 3 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = label[..n].iter().filter(|&&b| b).count() as f64 / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = f64::from(u8::from(label[i])) - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return (0.0, 1.0);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if 1.0 - r.abs() < 1e-15 {
        return (r, 0.0);
    }
    let df = nf - 2.0;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let p = match StudentsT::new(0.0, 1.0, df) {
        Ok(d) => 2.0 * (1.0 - d.cdf(t.abs())),
        Err(_) => 1.0,
    };
    (r, p.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretParams {
    pub proximity_trees: usize,
    pub rfe_trees: usize,
    pub rfe_step: usize,
    pub rfe_target: usize,
    pub tree_depth: usize,
    pub eps_grid: Vec<f64>,
    pub min_pts_grid: Vec<usize>,
    pub cv_folds: usize,
    /// Fixed DBSCAN (eps, min_pts); None grid-searches them.
    pub cluster: Option<(f64, usize)>,
    pub seed: u64,
}

impl Default for InterpretParams {
    fn default() -> Self {
        Self {
            proximity_trees: 500,
            rfe_trees: 100,
            rfe_step: 50,
            rfe_target: 30,
            tree_depth: 5,
            eps_grid: vec![0.2, 0.3, 0.4, 0.5],
            min_pts_grid: vec![5, 10, 20],
            cv_folds: 5,
            cluster: None,
            seed: 0,
        }
    }
}

/// Sample-level precision, recall, F for the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl Counts {
    fn add(&mut self, truth: bool, pred: bool) {
        match (truth, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            _ => {}
        }
    }

    fn prf(self) -> Prf {
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = div(self.tp, self.tp + self.fp);
        let recall = div(self.tp, self.tp + self.fn_);
        let fscore = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            fscore,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub eps: f64,
    pub min_pts: usize,
    pub n_clusters: usize,
    pub cluster_size: usize,
    /// Cross-validated F of the tree; None when DBSCAN found no cluster.
    pub cv_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub feature: String,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationReport {
    pub n_features: usize,
    pub n_samples: usize,
    pub n_positive: usize,
    pub grid: Vec<GridPoint>,
    pub eps: f64,
    pub min_pts: usize,
    /// Hour starts of the positive samples in the chosen cluster.
    pub cluster_hours: Vec<i64>,
    pub cluster_fraction: f64,
    pub rfe_rounds: Vec<usize>,
    /// Most important first, by the RFE forest.
    pub selected: Vec<String>,
    /// Gini importance of the final tree, descending.
    pub importance: Vec<FeatureWeight>,
    pub correlations: Vec<Correlation>,
    pub tree: Tree,
    pub tree_text: String,
    pub tree_depth: usize,
    /// Final tree on its own training subset.
    pub fit: Prf,
    pub cv_train: Prf,
    pub cv_test: Prf,
}

impl InterpretationReport {
    pub fn top_feature(&self) -> Option<&str> {
        self.importance.first().map(|w| w.feature.as_str())
    }
}

/// Seeded stratified k-fold assignment over `rows`.
fn stratified_folds(rows: &[usize], y: &[bool], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = tree_rng(seed, u64::MAX - 1);
    let mut pos: Vec<usize> = rows.iter().copied().filter(|&r| y[r]).collect();
    let mut neg: Vec<usize> = rows.iter().copied().filter(|&r| !y[r]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, r) in pos.into_iter().chain(neg).enumerate() {
        folds[i % k].push(r);
    }
    folds
}

fn predict_positive(tree: &Tree, row: &[f64]) -> bool {
    let v = &tree.leaf(row).value;
    v.len() > 1 && v[1] > v[0]
}

/// k-fold CV of the interpretation tree on `rows`, sharing one presort.
fn cv_tree(
    trainer: &TreeTrainer,
    x: &Matrix,
    y: &[bool],
    rows: &[usize],
    tp: &TreeParams,
    k: usize,
    seed: u64,
) -> Result<(Prf, Prf), InterpretError> {
    let folds = stratified_folds(rows, y, k, seed);
    let results: Vec<Result<(Counts, Counts), InterpretError>> = folds
        .par_iter()
        .enumerate()
        .map(|(f, _)| {
            let mut w = vec![0.0; trainer.n_rows()];
            for (g, fold) in folds.iter().enumerate() {
                if g != f {
                    fold.iter().for_each(|&r| w[r] = 1.0);
                }
            }
            let tree = trainer.fit(&w, tp, &mut tree_rng(seed, f as u64))?;
            let (mut tr, mut te) = (Counts::default(), Counts::default());
            for (g, fold) in folds.iter().enumerate() {
                let c = if g == f { &mut te } else { &mut tr };
                for &r in fold {
                    c.add(y[r], predict_positive(&tree, x.row(r)));
                }
            }
            Ok((tr, te))
        })
        .collect();
    let (mut tr, mut te) = (Counts::default(), Counts::default());
    for r in results {
        let (a, b) = r?;
        tr.tp += a.tp;
        tr.fp += a.fp;
        tr.fn_ += a.fn_;
        te.tp += b.tp;
        te.fp += b.fp;
        te.fn_ += b.fn_;
    }
    Ok((tr.prf(), te.prf()))
}

/// Renders one node per line as "pos/neg, feature, threshold", indented by
/// depth. Thresholds are mapped back to raw units.
pub fn render_tree(tree: &Tree, names: &[String], to_raw: impl Fn(usize, f64) -> f64) -> String {
    fn go(
        t: &Tree,
        i: usize,
        depth: usize,
        names: &[String],
        to_raw: &dyn Fn(usize, f64) -> f64,
        out: &mut String,
        side: &str,
    ) {
        let node = &t.nodes[i];
        let neg = node.value.first().copied().unwrap_or(0.0);
        let pos = node.value.get(1).copied().unwrap_or(0.0);
        let pad = "    ".repeat(depth);
        match &node.split {
            Some(s) => {
                let f = s.feature as usize;
                let _ = writeln!(
                    out,
                    "{pad}{side}{pos}/{neg}, {}, {:.4}",
                    names[f],
                    to_raw(f, s.threshold)
                );
                go(t, s.left as usize, depth + 1, names, to_raw, out, "<= ");
                go(t, s.right as usize, depth + 1, names, to_raw, out, "> ");
            }
            None => {
                let _ = writeln!(out, "{pad}{side}{pos}/{neg}, leaf");
            }
        }
    }
    let mut out = String::new();
    if !tree.nodes.is_empty() {
        go(tree, 0, 0, names, &to_raw, &mut out, "");
    }
    out
}

struct Prepared<'a> {
    x: &'a Matrix,
    positive: &'a [bool],
    names: Vec<String>,
    y: Vec<u32>,
    pos_rows: Vec<usize>,
    neg_rows: Vec<usize>,
}

impl<'a> Prepared<'a> {
    fn new(
        features: &'a FeatureMatrix,
        positive: &'a [bool],
        params: &InterpretParams,
    ) -> Result<Self, InterpretError> {
        let x = &features.data;
        let n = x.n_rows();
        if positive.len() != n {
            return Err(InterpretError::LabelCount {
                rows: n,
                labels: positive.len(),
            });
        }
        if params.cv_folds < 2 || params.tree_depth == 0 {
            return Err(InterpretError::Params(
                "cv_folds >= 2 and tree_depth >= 1 required".into(),
            ));
        }
        let pos_rows: Vec<usize> = (0..n).filter(|&r| positive[r]).collect();
        if pos_rows.len() < 2 {
            return Err(InterpretError::TooFewPositives {
                need: 2,
                got: pos_rows.len(),
            });
        }
        Ok(Self {
            x,
            positive,
            names: features.columns.iter().map(|c| c.to_string()).collect(),
            y: positive.iter().map(|&b| u32::from(b)).collect(),
            neg_rows: (0..n).filter(|&r| !positive[r]).collect(),
            pos_rows,
        })
    }

    fn proximity(&self, params: &InterpretParams) -> Result<ProximityMatrix, InterpretError> {
        unsupervised_proximity(&self.x.select_rows(&self.pos_rows), params.proximity_trees, params.seed)
    }

    /// Cluster positives plus every negative, sorted.
    fn subset(&self, members: &[usize]) -> Vec<usize> {
        let mut rows: Vec<usize> = members
            .iter()
            .map(|&m| self.pos_rows[m])
            .chain(self.neg_rows.iter().copied())
            .collect();
        rows.sort_unstable();
        rows
    }

    fn grid(&self, prox: &ProximityMatrix, params: &InterpretParams) -> Result<ClusterSelection, InterpretError> {
        if params.eps_grid.is_empty() || params.min_pts_grid.is_empty() {
            return Err(InterpretError::Params("empty DBSCAN grid".into()));
        }
        let tp = TreeParams::cart(Some(params.tree_depth));
        let trainer = TreeTrainer::new(self.x, Target::Classes(&self.y), Splitter::Best)?;
        let mut grid = Vec::new();
        let mut best: Option<(f64, usize)> = None;
        for &eps in &params.eps_grid {
            for &min_pts in &params.min_pts_grid {
                let point = match dbscan(prox, eps, min_pts) {
                    Err(InterpretError::NoCluster) => GridPoint {
                        eps,
                        min_pts,
                        n_clusters: 0,
                        cluster_size: 0,
                        cv_f: None,
                    },
                    Err(e) => return Err(e),
                    Ok(labels) => {
                        let members = largest_cluster(&labels);
                        let rows = self.subset(&members);
                        let (_, test) = cv_tree(
                            &trainer,
                            self.x,
                            self.positive,
                            &rows,
                            &tp,
                            params.cv_folds,
                            params.seed,
                        )?;
                        if best.is_none_or(|b| test.fscore > b.0) {
                            best = Some((test.fscore, grid.len()));
                        }
                        GridPoint {
                            eps,
                            min_pts,
                            n_clusters: labels.iter().max().map_or(0, |&m| (m + 1) as usize),
                            cluster_size: members.len(),
                            cv_f: Some(test.fscore),
                        }
                    }
                };
                log::debug!("dbscan grid {point:?}");
                grid.push(point);
            }
        }
        let Some((_, chosen)) = best else {
            return Err(InterpretError::NoCluster);
        };
        Ok(ClusterSelection {
            eps: grid[chosen].eps,
            min_pts: grid[chosen].min_pts,
            grid,
        })
    }
}

/// Outcome of the DBSCAN parameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSelection {
    pub eps: f64,
    pub min_pts: usize,
    pub grid: Vec<GridPoint>,
}

/// Grid search over DBSCAN (eps, min_pts) by the cross-validated F of the
/// depth-limited tree on the largest cluster plus all negatives. The best
/// strictly greater F wins, so ties keep the earlier grid point.
pub fn select_cluster_params(
    features: &FeatureMatrix,
    positive: &[bool],
    params: &InterpretParams,
) -> Result<ClusterSelection, InterpretError> {
    let prep = Prepared::new(features, positive, params)?;
    let prox = prep.proximity(params)?;
    prep.grid(&prox, params)
}

/// Runs the whole pipeline on standardized interpretation features. With
/// `params.cluster` unset the DBSCAN parameters are grid-searched first.
pub fn interpret(
    features: &FeatureMatrix,
    positive: &[bool],
    params: &InterpretParams,
) -> Result<InterpretationReport, InterpretError> {
    let prep = Prepared::new(features, positive, params)?;
    let (x, y, names) = (prep.x, &prep.y, &prep.names);
    let n = x.n_rows();
    let prox = prep.proximity(params)?;
    let selection = match params.cluster {
        Some((eps, min_pts)) => ClusterSelection {
            eps,
            min_pts,
            grid: Vec::new(),
        },
        None => prep.grid(&prox, params)?,
    };
    let labels = dbscan(&prox, selection.eps, selection.min_pts)?;
    let members = largest_cluster(&labels);
    let rows = prep.subset(&members);
    let x_sub = x.select_rows(&rows);
    let y_sub: Vec<u32> = rows.iter().map(|&r| y[r]).collect();

    let mut rf = ForestParams::new(Variant::RandomForest, Task::Classification);
    rf.n_trees = params.rfe_trees;
    rf.max_features = MaxFeatures::Sqrt;
    rf.seed = params.seed;
    let elim = rfe(&x_sub, &y_sub, params.rfe_step, params.rfe_target, &rf)?;
    let sel = elim.selected;

    let tp = TreeParams::cart(Some(params.tree_depth));
    let x_sel = x.select_cols(&sel);
    let sel_names: Vec<String> = sel.iter().map(|&c| names[c].clone()).collect();
    let sel_trainer = TreeTrainer::new(&x_sel, Target::Classes(y), Splitter::Best)?;
    let (cv_train, cv_test) = cv_tree(&sel_trainer, &x_sel, positive, &rows, &tp, params.cv_folds, params.seed)?;
    let mut w = vec![0.0; n];
    rows.iter().for_each(|&r| w[r] = 1.0);
    let tree = sel_trainer.fit(&w, &tp, &mut tree_rng(params.seed, u64::MAX - 2))?;
    let mut fit = Counts::default();
    for &r in &rows {
        fit.add(positive[r], predict_positive(&tree, x_sel.row(r)));
    }

    let imp = tree.normalized_importance();
    let mut importance: Vec<FeatureWeight> = sel_names
        .iter()
        .zip(&imp)
        .map(|(f, &v)| FeatureWeight {
            feature: f.clone(),
            importance: v,
        })
        .collect();
    importance.sort_by(|a, b| b.importance.total_cmp(&a.importance));

    let correlations = sel
        .iter()
        .map(|&c| {
            let (r, p_value) = point_biserial(&x.column(c), positive);
            Correlation {
                feature: names[c].clone(),
                r,
                p_value,
                n,
            }
        })
        .collect();

    let stats = &features.standardizer.stats;
    let tree_text = render_tree(&tree, &sel_names, |f, t| {
        let s = &stats[sel[f]];
        if s.all_missing || s.std < MIN_STD {
            s.mean
        } else {
            s.mean + t * s.std
        }
    });

    Ok(InterpretationReport {
        n_features: x.n_cols(),
        n_samples: n,
        n_positive: prep.pos_rows.len(),
        eps: selection.eps,
        min_pts: selection.min_pts,
        grid: selection.grid,
        cluster_hours: members
            .iter()
            .map(|&m| features.hours[prep.pos_rows[m]].hour_start)
            .collect(),
        cluster_fraction: members.len() as f64 / prep.pos_rows.len() as f64,
        rfe_rounds: elim.rounds,
        selected: sel_names,
        importance,
        correlations,
        tree_depth: tree.depth(),
        tree,
        tree_text,
        fit: fit.prf(),
        cv_train,
        cv_test,
    })
}
