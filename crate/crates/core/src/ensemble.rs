//! CART trees, Random Forest and Extremely Randomized Trees.
//!
//! Trees are stored as flat node vectors. Bootstrap resampling is expressed
//! as integer sample weights, which grows the same tree as duplicating rows
//! but touches each distinct row once per node.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matrix::Matrix;

pub const MODEL_FORMAT_VERSION: u32 = 1;

const FILTER_FACTOR: f64 = 1.0;
const RADIX_MIN: usize = 256;

/// LSD radix sort of `(rank << 32) | index` keys on the rank half; stable,
/// so equal ranks keep ascending indices like the comparison sort.
fn radix_sort_high(keys: &mut Vec<u64>, scratch: &mut Vec<u64>, bits: u32) {
    scratch.clear();
    scratch.resize(keys.len(), 0);
    let mut shift = 32;
    while shift < 32 + bits {
        let mut counts = [0usize; 257];
        for &k in keys.iter() {
            counts[((k >> shift) & 0xff) as usize + 1] += 1;
        }
        for d in 0..256 {
            counts[d + 1] += counts[d];
        }
        for &k in keys.iter() {
            let d = ((k >> shift) & 0xff) as usize;
            scratch[counts[d]] = k;
            counts[d] += 1;
        }
        std::mem::swap(keys, scratch);
        shift += 8;
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("no training samples")]
    Empty,
    #[error("{rows} rows of predictors but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("predictors contain a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("model expects {expected} columns, got {got}")]
    ColumnMismatch { expected: usize, got: usize },
    #[error("column descriptors differ from training: expected {expected}, got {got}")]
    DescriptorMismatch { expected: String, got: String },
    #[error("model blob: {0}")]
    Blob(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "rf")]
    RandomForest,
    #[serde(rename = "et")]
    ExtraTrees,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "classify")]
    Classification,
    #[serde(rename = "regress")]
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    All,
    Sqrt,
    Fraction(f64),
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, p: usize) -> usize {
        let k = match self {
            MaxFeatures::All => p,
            MaxFeatures::Sqrt => (p as f64).sqrt() as usize,
            MaxFeatures::Fraction(f) => (f * p as f64) as usize,
            MaxFeatures::Count(k) => k,
        };
        k.clamp(1, p.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Splitter {
    /// Best midpoint between consecutive distinct values.
    Best,
    /// One uniform threshold between the node minimum and maximum.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub splitter: Splitter,
    pub max_features: MaxFeatures,
    pub min_samples_split: usize,
    pub max_depth: Option<usize>,
}

impl TreeParams {
    /// Exhaustive CART over all features.
    pub fn cart(max_depth: Option<usize>) -> Self {
        Self {
            splitter: Splitter::Best,
            max_features: MaxFeatures::All,
            min_samples_split: 2,
            max_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub variant: Variant,
    pub task: Task,
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    pub min_samples_split: usize,
    #[serde(default)]
    pub max_depth: Option<usize>,
    pub seed: u64,
    /// Regression scores at or above this are classed positive.
    pub score_threshold: f64,
}

impl ForestParams {
    pub fn new(variant: Variant, task: Task) -> Self {
        Self {
            variant,
            task,
            n_trees: match task {
                Task::Classification => 1000,
                Task::Regression => 200,
            },
            max_features: MaxFeatures::Sqrt,
            min_samples_split: 2,
            max_depth: None,
            seed: 0,
            score_threshold: 40.0,
        }
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            splitter: match self.variant {
                Variant::RandomForest => Splitter::Best,
                Variant::ExtraTrees => Splitter::Random,
            },
            max_features: self.max_features,
            min_samples_split: self.min_samples_split,
            max_depth: self.max_depth,
        }
    }

    fn validate(&self) -> Result<(), EnsembleError> {
        if self.n_trees == 0 {
            return Err(EnsembleError::Params("n_trees must be at least 1".into()));
        }
        validate_tree(&self.tree_params())
    }
}

fn validate_tree(p: &TreeParams) -> Result<(), EnsembleError> {
    match p.max_features {
        MaxFeatures::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
            return Err(EnsembleError::Params(format!(
                "max_features fraction {f} not in (0, 1]"
            )))
        }
        MaxFeatures::Count(0) => return Err(EnsembleError::Params("max_features count 0".into())),
        _ => {}
    }
    if p.min_samples_split < 2 {
        return Err(EnsembleError::Params("min_samples_split must be at least 2".into()));
    }
    Ok(())
}

/// Training response.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Classes(&'a [u32]),
    Values(&'a [f64]),
}

impl Target<'_> {
    fn len(&self) -> usize {
        match self {
            Target::Classes(c) => c.len(),
            Target::Values(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: u32,
    /// Samples with `x <= threshold` go left.
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub split: Option<Split>,
    /// Sample count, bootstrap multiplicity included.
    pub weight: f64,
    /// Gini impurity or variance.
    pub impurity: f64,
    /// Class counts, or the single mean response.
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
    /// Un-normalized impurity decrease per feature.
    pub impurity_decrease: Vec<f64>,
}

impl Tree {
    #[inline]
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        while let Some(s) = &self.nodes[i].split {
            i = if row[s.feature as usize] <= s.threshold {
                s.left as usize
            } else {
                s.right as usize
            };
        }
        i
    }

    pub fn leaf(&self, row: &[f64]) -> &Node {
        &self.nodes[self.leaf_index(row)]
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i].split {
                None => 0,
                Some(s) => 1 + go(t, s.left as usize).max(go(t, s.right as usize)),
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_none()).count()
    }

    /// Per-tree importance normalized to sum 1, zeros if the tree never split.
    pub fn normalized_importance(&self) -> Vec<f64> {
        normalize(self.impurity_decrease.clone())
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    v
}

/// Weighted Gini impurity, `1 - sum p_c^2`.
pub fn gini(counts: &[f64]) -> f64 {
    let w: f64 = counts.iter().sum();
    if w <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / w) * (c / w)).sum::<f64>()
}

/// Unsigned key ordered like `f64::total_cmp`. Finite inputs only reach
/// here, and -0.0 vs 0.0 is the one pair it separates that `==` does not.
fn total_order_key(v: f64) -> u64 {
    let v = if v == 0.0 { 0.0 } else { v };
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Predictor columns plus, for the best-split search, a global sort order
/// and dense ranks per column.
struct Prepared {
    n: usize,
    cols: Vec<Vec<f64>>,
    order: Vec<Vec<u32>>,
    rank: Vec<Vec<u32>>,
    rank_bits: u32,
}

impl Prepared {
    fn new(x: &Matrix, sorted: bool) -> Result<Self, EnsembleError> {
        let (n, p) = (x.n_rows(), x.n_cols());
        let mut cols = vec![Vec::with_capacity(n); p];
        for r in 0..n {
            for (c, &v) in x.row(r).iter().enumerate() {
                if !v.is_finite() {
                    return Err(EnsembleError::NonFinite { row: r, col: c });
                }
                cols[c].push(v);
            }
        }
        let (mut order, mut rank) = (Vec::new(), Vec::new());
        if sorted {
            let mut pairs: Vec<(u64, u32)> = Vec::with_capacity(n);
            for col in &cols {
                pairs.clear();
                pairs.extend(col.iter().enumerate().map(|(i, &v)| (total_order_key(v), i as u32)));
                pairs.sort_unstable();
                let mut rk = vec![0u32; n];
                let mut cur = 0u32;
                for k in 0..n {
                    if k > 0 && pairs[k].0 != pairs[k - 1].0 {
                        cur += 1;
                    }
                    rk[pairs[k].1 as usize] = cur;
                }
                order.push(pairs.iter().map(|p| p.1).collect());
                rank.push(rk);
            }
        }
        let max_rank = rank.iter().flat_map(|r| r.iter().copied()).max().unwrap_or(0);
        let rank_bits = 32 - max_rank.leading_zeros();
        Ok(Self {
            n,
            cols,
            order,
            rank,
            rank_bits,
        })
    }
}

struct Response {
    y: Vec<f64>,
    classify: bool,
    n_classes: usize,
}

impl Response {
    fn new(t: Target<'_>) -> Self {
        match t {
            Target::Classes(c) => Response {
                y: c.iter().map(|&v| v as f64).collect(),
                classify: true,
                n_classes: c.iter().copied().max().map_or(1, |m| m as usize + 1),
            },
            Target::Values(v) => Response {
                y: v.to_vec(),
                classify: false,
                n_classes: 0,
            },
        }
    }
}

/// Sufficient statistics of a set of weighted samples.
#[derive(Clone)]
struct Acc {
    w: f64,
    sum: f64,
    sumsq: f64,
    counts: Vec<f64>,
    /// sum of squared class counts
    csq: f64,
}

impl Acc {
    fn new(n_classes: usize) -> Self {
        Acc {
            w: 0.0,
            sum: 0.0,
            sumsq: 0.0,
            counts: vec![0.0; n_classes],
            csq: 0.0,
        }
    }

    /// `sum c^2 / w` or `sum^2 / w`; larger children values mean purer splits.
    fn proxy(&self, classify: bool) -> f64 {
        if self.w <= 0.0 {
            0.0
        } else if classify {
            self.csq / self.w
        } else {
            self.sum * self.sum / self.w
        }
    }

    fn impurity(&self, classify: bool) -> f64 {
        if self.w <= 0.0 {
            return 0.0;
        }
        if classify {
            (1.0 - self.csq / (self.w * self.w)).max(0.0)
        } else {
            let m = self.sum / self.w;
            (self.sumsq / self.w - m * m).max(0.0)
        }
    }

    fn value(&self, classify: bool) -> Vec<f64> {
        if classify {
            self.counts.clone()
        } else {
            vec![if self.w > 0.0 { self.sum / self.w } else { 0.0 }]
        }
    }
}

/// Left-side running statistics for a sweep; the right side is the parent minus the left.
struct Sweep<'p> {
    parent: &'p Acc,
    classify: bool,
    w: f64,
    sum: f64,
    counts: Vec<f64>,
    csq: f64,
    /// sum over classes of parent_c * left_c
    cross: f64,
}

impl<'p> Sweep<'p> {
    fn new(parent: &'p Acc, classify: bool) -> Self {
        Sweep {
            parent,
            classify,
            w: 0.0,
            sum: 0.0,
            counts: vec![0.0; parent.counts.len()],
            csq: 0.0,
            cross: 0.0,
        }
    }

    fn reset(&mut self) {
        self.w = 0.0;
        self.sum = 0.0;
        self.counts.iter_mut().for_each(|c| *c = 0.0);
        self.csq = 0.0;
        self.cross = 0.0;
    }

    #[inline]
    fn add(&mut self, y: f64, w: f64) {
        self.w += w;
        if self.classify {
            let k = y as usize;
            let c = self.counts[k];
            self.csq += w * (2.0 * c + w);
            self.cross += self.parent.counts[k] * w;
            self.counts[k] = c + w;
        } else {
            self.sum += w * y;
        }
    }

    #[inline]
    fn children_proxy(&self) -> f64 {
        let wr = self.parent.w - self.w;
        if self.w <= 0.0 || wr <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if self.classify {
            let rsq = self.parent.csq - 2.0 * self.cross + self.csq;
            self.csq / self.w + rsq / wr
        } else {
            let sr = self.parent.sum - self.sum;
            self.sum * self.sum / self.w + sr * sr / wr
        }
    }
}

struct Found {
    feature: usize,
    threshold: f64,
    proxy: f64,
}

enum Outcome {
    Constant,
    Candidate(Option<(f64, f64)>),
}

struct Grower<'a> {
    data: &'a Prepared,
    resp: &'a Response,
    w: &'a [f64],
    params: TreeParams,
    mtry: usize,
    samples: Vec<u32>,
    mark: Vec<u32>,
    stamp: u32,
    keys: Vec<u64>,
    scratch: Vec<u64>,
    mode: Mode,
    /// `(w, w * y)` per row
    wy: Vec<[f64; 2]>,
    feats: Vec<usize>,
    /// When every feature is searched at every node: per feature, the node
    /// samples in sorted order as `rank << 32 | row` keys, laid out in the
    /// same segments as `samples`.
    sorted: Vec<Vec<u64>>,
    goes_left: Vec<bool>,
    nodes: Vec<Node>,
    decrease: Vec<f64>,
}

impl<'a> Grower<'a> {
    fn acc_of(&self, s: &[u32]) -> (Acc, bool) {
        let mut a = Acc::new(self.resp.n_classes);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in s {
            let (y, w) = (self.resp.y[i as usize], self.w[i as usize]);
            a.w += w;
            if self.resp.classify {
                a.counts[y as usize] += w;
            } else {
                a.sum += w * y;
                a.sumsq += w * y * y;
            }
            lo = lo.min(y);
            hi = hi.max(y);
        }
        a.csq = a.counts.iter().map(|c| c * c).sum();
        (a, lo == hi)
    }

    fn node(&self, a: &Acc) -> Node {
        Node {
            split: None,
            weight: a.w,
            impurity: a.impurity(self.resp.classify),
            value: a.value(self.resp.classify),
        }
    }

    fn grow(mut self, rng: &mut ChaCha8Rng) -> Tree {
        let n = self.samples.len();
        if self.params.splitter == Splitter::Best && self.mtry >= self.feats.len() {
            let w = self.w;
            self.sorted = self
                .data
                .order
                .iter()
                .zip(&self.data.rank)
                .map(|(o, rk)| {
                    o.iter()
                        .filter(|&&i| w[i as usize] > 0.0)
                        .map(|&i| ((rk[i as usize] as u64) << 32) | i as u64)
                        .collect()
                })
                .collect();
            self.goes_left = vec![false; self.data.n];
        }
        let (root, pure) = self.acc_of(&self.samples);
        self.nodes.push(self.node(&root));
        let mut stack = vec![(0usize, 0usize, n, 0usize, root, pure)];
        while let Some((id, start, end, depth, acc, pure)) = stack.pop() {
            let can_split = !pure
                && acc.w >= self.params.min_samples_split as f64
                && end - start >= 2
                && self.params.max_depth.is_none_or(|d| depth < d);
            if !can_split {
                continue;
            }
            let Some(found) = self.search(start, end, &acc, rng) else {
                continue;
            };
            let parent_proxy = acc.proxy(self.resp.classify);
            // Partition by the chosen threshold.
            let col = &self.data.cols[found.feature];
            let seg = &mut self.samples[start..end];
            let mut k = 0;
            for j in 0..seg.len() {
                if col[seg[j] as usize] <= found.threshold {
                    seg.swap(j, k);
                    k += 1;
                }
            }
            let mid = start + k;
            debug_assert!(mid > start && mid < end);
            if !self.sorted.is_empty() {
                self.partition_sorted(start, mid, end);
            }
            let (la, lp) = self.acc_of(&self.samples[start..mid]);
            let (ra, rp) = self.acc_of(&self.samples[mid..end]);
            self.decrease[found.feature] += found.proxy - parent_proxy;
            let left = self.nodes.len();
            self.nodes.push(self.node(&la));
            self.nodes.push(self.node(&ra));
            self.nodes[id].split = Some(Split {
                feature: found.feature as u32,
                threshold: found.threshold,
                left: left as u32,
                right: left as u32 + 1,
            });
            stack.push((left + 1, mid, end, depth + 1, ra, rp));
            stack.push((left, start, mid, depth + 1, la, lp));
        }
        Tree {
            nodes: self.nodes,
            n_features: self.data.cols.len(),
            impurity_decrease: self.decrease,
        }
    }

    /// Stable partition of every per-feature list after a split.
    fn partition_sorted(&mut self, start: usize, mid: usize, end: usize) {
        for &i in &self.samples[start..mid] {
            self.goes_left[i as usize] = true;
        }
        let flags = &self.goes_left;
        let mut right: Vec<u64> = Vec::with_capacity(end - mid);
        for list in &mut self.sorted {
            right.clear();
            let seg = &mut list[start..end];
            let mut k = 0;
            for j in 0..seg.len() {
                let i = seg[j];
                if flags[i as u32 as usize] {
                    seg[k] = i;
                    k += 1;
                } else {
                    right.push(i);
                }
            }
            seg[k..].copy_from_slice(&right);
        }
        for &i in &self.samples[start..mid] {
            self.goes_left[i as usize] = false;
        }
    }

    /// Draw features in random order until `mtry` non-constant ones have
    /// been evaluated, keeping the best strictly improving split.
    fn search(&mut self, start: usize, end: usize, parent: &Acc, rng: &mut ChaCha8Rng) -> Option<Found> {
        let p = self.feats.len();
        let classify = self.resp.classify;
        let parent_proxy = parent.proxy(classify);
        let tol = 1e-12 * parent_proxy.abs().max(1.0);
        let mut best: Option<Found> = None;
        let mut visited = 0;
        let mut sweep = Sweep::new(parent, classify);
        if self.params.splitter == Splitter::Best && self.sorted.is_empty() {
            self.stamp = self.stamp.wrapping_add(1);
            let stamp = self.stamp;
            for &i in &self.samples[start..end] {
                self.mark[i as usize] = stamp;
            }
        }
        for k in 0..p {
            if visited == self.mtry {
                break;
            }
            let j = rng.random_range(k..p);
            self.feats.swap(k, j);
            let f = self.feats[k];
            let outcome = match self.params.splitter {
                Splitter::Best => self.best_threshold(f, start, end, &mut sweep),
                Splitter::Random => self.random_threshold(f, start, end, &mut sweep, rng),
            };
            match outcome {
                Outcome::Constant => {}
                Outcome::Candidate(c) => {
                    visited += 1;
                    if let Some((thr, proxy)) = c {
                        if proxy - parent_proxy > tol && best.as_ref().is_none_or(|b| proxy > b.proxy) {
                            best = Some(Found {
                                feature: f,
                                threshold: thr,
                                proxy,
                            });
                        }
                    }
                }
            }
        }
        best
    }

    fn best_threshold(&mut self, f: usize, start: usize, end: usize, sweep: &mut Sweep) -> Outcome {
        let m = end - start;
        let rank = &self.data.rank[f];
        self.keys.clear();
        // Filtering the global order costs O(N); sorting the node costs O(m log m).
        // Per-node presorted lists, when kept, need neither.
        let m_log = m as f64 * (m as f64).log2().max(1.0);
        if !self.sorted.is_empty() {
            // already in order
        } else if (self.data.n as f64) < FILTER_FACTOR * m_log {
            let stamp = self.stamp;
            let mark = &self.mark;
            self.keys.extend(
                self.data.order[f]
                    .iter()
                    .filter(|&&i| mark[i as usize] == stamp)
                    .map(|&i| ((rank[i as usize] as u64) << 32) | i as u64),
            );
        } else {
            self.keys.extend(
                self.samples[start..end]
                    .iter()
                    .map(|&i| ((rank[i as usize] as u64) << 32) | i as u64),
            );
            if m > RADIX_MIN {
                radix_sort_high(&mut self.keys, &mut self.scratch, self.data.rank_bits);
            } else {
                self.keys.sort_unstable();
            }
        }
        let keys: &[u64] = if self.sorted.is_empty() {
            &self.keys
        } else {
            &self.sorted[f][start..end]
        };
        if keys[0] >> 32 == keys[m - 1] >> 32 {
            return Outcome::Constant;
        }
        let mut best: Option<(usize, f64)> = None;
        let mut consider = |j: usize, pr: f64| {
            if best.is_none_or(|(_, b)| pr > b) {
                best = Some((j, pr));
            }
        };
        match self.mode {
            Mode::Multi => {
                sweep.reset();
                for j in 0..m - 1 {
                    let i = keys[j] as u32 as usize;
                    sweep.add(self.resp.y[i], self.w[i]);
                    if keys[j] >> 32 != keys[j + 1] >> 32 {
                        consider(j, sweep.children_proxy());
                    }
                }
            }
            Mode::Binary => {
                // Under a concave impurity, a cut strictly inside a run of
                // same-class value groups is never better than the run's
                // ends, so only boundaries whose two neighbouring groups
                // together hold both classes are scored.
                let (pw, ps) = (sweep.parent.w, self.parent_sum(sweep.parent));
                let wy = &self.wy[..];
                let (mut wl, mut sl) = (0.0, 0.0);
                // boundary after the previous group: (last index, wl, sl, classes)
                let mut prev: Option<(usize, f64, f64, u8)> = None;
                let mut mask = 0u8;
                let mut cur = keys[0] >> 32;
                for (j, &key) in keys.iter().enumerate() {
                    if key >> 32 != cur {
                        cur = key >> 32;
                        if let Some((pj, pwl, psl, pmask)) = prev {
                            if pmask | mask == 3 {
                                consider(pj, children_proxy2(true, pwl, psl, pw, ps));
                            }
                        }
                        prev = Some((j - 1, wl, sl, mask));
                        mask = 0;
                    }
                    let [w, ws] = wy[key as u32 as usize];
                    wl += w;
                    sl += ws;
                    mask |= 1 + u8::from(ws > 0.0);
                }
                if let Some((pj, pwl, psl, pmask)) = prev {
                    if pmask | mask == 3 {
                        consider(pj, children_proxy2(true, pwl, psl, pw, ps));
                    }
                }
            }
            Mode::Regression => {
                let (pw, ps) = (sweep.parent.w, self.parent_sum(sweep.parent));
                let (mut wl, mut sl) = (0.0, 0.0);
                for j in 0..m - 1 {
                    let [w, ws] = self.wy[keys[j] as u32 as usize];
                    wl += w;
                    sl += ws;
                    if keys[j] >> 32 != keys[j + 1] >> 32 {
                        consider(j, children_proxy2(false, wl, sl, pw, ps));
                    }
                }
            }
        }
        let col = &self.data.cols[f];
        Outcome::Candidate(best.map(|(j, pr)| {
            let a = col[keys[j] as u32 as usize];
            let b = col[keys[j + 1] as u32 as usize];
            let mut mid = 0.5 * (a + b);
            if !(mid < b) {
                mid = a;
            }
            (mid, pr)
        }))
    }

    fn parent_sum(&self, parent: &Acc) -> f64 {
        match self.mode {
            Mode::Binary => parent.counts.get(1).copied().unwrap_or(0.0),
            _ => parent.sum,
        }
    }

    fn random_threshold(&self, f: usize, start: usize, end: usize, sweep: &mut Sweep, rng: &mut ChaCha8Rng) -> Outcome {
        let col = &self.data.cols[f];
        let s = &self.samples[start..end];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in s {
            let v = col[i as usize];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(lo < hi) {
            return Outcome::Constant;
        }
        let thr = rng.random_range(lo..hi);
        let proxy = match self.mode {
            Mode::Multi => {
                sweep.reset();
                for &i in s {
                    let i = i as usize;
                    if col[i] <= thr {
                        sweep.add(self.resp.y[i], self.w[i]);
                    }
                }
                sweep.children_proxy()
            }
            mode => {
                let (mut wl, mut sl) = (0.0, 0.0);
                for &i in s {
                    let i = i as usize;
                    let left = (col[i] <= thr) as u8 as f64;
                    let [w, ws] = self.wy[i];
                    wl += left * w;
                    sl += left * ws;
                }
                children_proxy2(
                    mode == Mode::Binary,
                    wl,
                    sl,
                    sweep.parent.w,
                    self.parent_sum(sweep.parent),
                )
            }
        };
        Outcome::Candidate(Some((thr, proxy)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Two classes: the left sums are (count, positives).
    Binary,
    /// The left sums are (count, sum of responses).
    Regression,
    Multi,
}

/// Children proxy of [`Sweep::children_proxy`] from the left weight and
/// left weighted sum alone.
#[inline]
fn children_proxy2(binary: bool, wl: f64, sl: f64, pw: f64, ps: f64) -> f64 {
    let (wr, sr) = (pw - wl, ps - sl);
    if wl <= 0.0 || wr <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if binary {
        let (l0, r0) = (wl - sl, wr - sr);
        (l0 * l0 + sl * sl) / wl + (r0 * r0 + sr * sr) / wr
    } else {
        sl * sl / wl + sr * sr / wr
    }
}

fn check_shapes(x: &Matrix, y: &Target) -> Result<(), EnsembleError> {
    if x.n_rows() == 0 {
        return Err(EnsembleError::Empty);
    }
    if y.len() != x.n_rows() {
        return Err(EnsembleError::LabelCount {
            rows: x.n_rows(),
            labels: y.len(),
        });
    }
    if let Target::Values(v) = y {
        if let Some(r) = v.iter().position(|v| !v.is_finite()) {
            return Err(EnsembleError::NonFinite {
                row: r,
                col: usize::MAX,
            });
        }
    }
    Ok(())
}

fn grow_one(data: &Prepared, resp: &Response, weights: &[f64], params: TreeParams, rng: &mut ChaCha8Rng) -> Tree {
    let p = data.cols.len();
    let samples: Vec<u32> = (0..data.n as u32).filter(|&i| weights[i as usize] > 0.0).collect();
    let mode = match (resp.classify, resp.n_classes) {
        (false, _) => Mode::Regression,
        (true, k) if k <= 2 => Mode::Binary,
        _ => Mode::Multi,
    };
    Grower {
        data,
        resp,
        w: weights,
        params,
        mtry: params.max_features.resolve(p),
        samples,
        mark: vec![0; if params.splitter == Splitter::Best { data.n } else { 0 }],
        stamp: 0,
        keys: Vec::new(),
        scratch: Vec::new(),
        mode,
        wy: weights.iter().zip(&resp.y).map(|(&w, &y)| [w, w * y]).collect(),
        feats: (0..p).collect(),
        sorted: Vec::new(),
        goes_left: Vec::new(),
        nodes: Vec::new(),
        decrease: vec![0.0; p],
    }
    .grow(rng)
}

/// Presorted rows that can be refit under many weightings, e.g. the folds
/// of a cross-validation. Rows with zero weight take no part in a fit.
pub struct TreeTrainer {
    data: Prepared,
    resp: Response,
    splitter: Splitter,
}

impl TreeTrainer {
    pub fn new(x: &Matrix, y: Target<'_>, splitter: Splitter) -> Result<Self, EnsembleError> {
        check_shapes(x, &y)?;
        Ok(Self {
            data: Prepared::new(x, splitter == Splitter::Best)?,
            resp: Response::new(y),
            splitter,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.data.n
    }

    pub fn fit(&self, weights: &[f64], params: &TreeParams, rng: &mut ChaCha8Rng) -> Result<Tree, EnsembleError> {
        validate_tree(params)?;
        if params.splitter != self.splitter {
            return Err(EnsembleError::Params("splitter differs from the prepared one".into()));
        }
        if weights.len() != self.data.n {
            return Err(EnsembleError::Params("weight count differs from rows".into()));
        }
        if weights.iter().all(|&v| v <= 0.0) {
            return Err(EnsembleError::Empty);
        }
        Ok(grow_one(&self.data, &self.resp, weights, *params, rng))
    }
}

/// Fit one tree. `weights` are per-row multiplicities (default 1).
pub fn fit_tree(
    x: &Matrix,
    y: Target<'_>,
    weights: Option<&[f64]>,
    params: &TreeParams,
    rng: &mut ChaCha8Rng,
) -> Result<Tree, EnsembleError> {
    check_shapes(x, &y)?;
    validate_tree(params)?;
    if let Some(w) = weights {
        if w.len() != x.n_rows() {
            return Err(EnsembleError::Params("weight count differs from rows".into()));
        }
    }
    let trainer = TreeTrainer::new(x, y, params.splitter)?;
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = vec![1.0; x.n_rows()];
            &ones
        }
    };
    trainer.fit(w, params, rng)
}

/// Deterministic stream for tree `index` of a forest seeded with `seed`.
pub fn tree_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub params: ForestParams,
    pub n_features: usize,
    pub n_classes: usize,
    pub descriptor_hash: String,
    pub trees: Vec<Tree>,
}

pub fn fit_forest(
    x: &Matrix,
    y: Target<'_>,
    params: &ForestParams,
    descriptor_hash: impl Into<String>,
) -> Result<ForestModel, EnsembleError> {
    check_shapes(x, &y)?;
    params.validate()?;
    match (params.task, &y) {
        (Task::Classification, Target::Classes(_)) | (Task::Regression, Target::Values(_)) => {}
        _ => return Err(EnsembleError::Params("target kind does not match task".into())),
    }
    let tp = params.tree_params();
    let data = Prepared::new(x, tp.splitter == Splitter::Best)?;
    let resp = Response::new(y);
    let n = x.n_rows();
    let bootstrap = params.variant == Variant::RandomForest;
    let trees: Vec<Tree> = (0..params.n_trees as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(params.seed, t);
            let w = if bootstrap {
                let mut w = vec![0.0; n];
                for _ in 0..n {
                    w[rng.random_range(0..n)] += 1.0;
                }
                w
            } else {
                vec![1.0; n]
            };
            grow_one(&data, &resp, &w, tp, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        params: params.clone(),
        n_features: x.n_cols(),
        n_classes: resp.n_classes,
        descriptor_hash: descriptor_hash.into(),
        trees,
    })
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl ForestModel {
    pub fn check_descriptor(&self, hash: &str) -> Result<(), EnsembleError> {
        if hash != self.descriptor_hash {
            return Err(EnsembleError::DescriptorMismatch {
                expected: self.descriptor_hash.clone(),
                got: hash.to_string(),
            });
        }
        Ok(())
    }

    fn check_width(&self, x: &Matrix) -> Result<(), EnsembleError> {
        if x.n_cols() != self.n_features {
            return Err(EnsembleError::ColumnMismatch {
                expected: self.n_features,
                got: x.n_cols(),
            });
        }
        Ok(())
    }

    /// Mean per-tree class distribution.
    pub fn predict_proba_row(&self, row: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.n_classes];
        for t in &self.trees {
            let leaf = t.leaf(row);
            for (acc, c) in p.iter_mut().zip(&leaf.value) {
                *acc += c / leaf.weight;
            }
        }
        p.iter_mut().for_each(|v| *v /= self.trees.len() as f64);
        p
    }

    /// Majority vote; ties go to the larger mean class probability, then the lower class.
    pub fn vote_row(&self, row: &[f64]) -> u32 {
        let mut votes = vec![0.0; self.n_classes];
        let mut prob = vec![0.0; self.n_classes];
        for t in &self.trees {
            let leaf = t.leaf(row);
            votes[argmax_first(&leaf.value)] += 1.0;
            for (acc, c) in prob.iter_mut().zip(&leaf.value) {
                *acc += c / leaf.weight;
            }
        }
        let top = votes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best: Option<usize> = None;
        for k in 0..self.n_classes {
            if votes[k] == top && best.is_none_or(|b| prob[k] > prob[b]) {
                best = Some(k);
            }
        }
        best.unwrap_or(0) as u32
    }

    /// Mean of the per-tree leaf means.
    pub fn score_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.leaf(row).value[0]).sum::<f64>() / self.trees.len() as f64
    }

    /// Class labels. Regression scores are thresholded at `score_threshold`.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<u32>, EnsembleError> {
        self.check_width(x)?;
        Ok((0..x.n_rows())
            .map(|r| match self.params.task {
                Task::Classification => self.vote_row(x.row(r)),
                Task::Regression => (self.score_row(x.row(r)) >= self.params.score_threshold) as u32,
            })
            .collect())
    }

    /// Regression scores, or the positive-class probability when classifying.
    pub fn predict_scores(&self, x: &Matrix) -> Result<Vec<f64>, EnsembleError> {
        self.check_width(x)?;
        Ok((0..x.n_rows())
            .map(|r| match self.params.task {
                Task::Classification => self.predict_proba_row(x.row(r)).get(1).copied().unwrap_or(0.0),
                Task::Regression => self.score_row(x.row(r)),
            })
            .collect())
    }

    /// Leaf index of every row in every tree, `[tree][row]`.
    pub fn apply(&self, x: &Matrix) -> Result<Vec<Vec<u32>>, EnsembleError> {
        self.check_width(x)?;
        Ok(self
            .trees
            .par_iter()
            .map(|t| (0..x.n_rows()).map(|r| t.leaf_index(x.row(r)) as u32).collect())
            .collect())
    }

    /// Gini (or variance) importance, averaged over trees and normalized to sum 1.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_features];
        for t in &self.trees {
            for (a, v) in acc.iter_mut().zip(t.normalized_importance()) {
                *a += v;
            }
        }
        normalize(acc)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("model serializes")
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, EnsembleError> {
        let m: ForestModel = serde_json::from_slice(b).map_err(|e| EnsembleError::Blob(e.to_string()))?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(EnsembleError::Blob(format!(
                "unsupported format version {}",
                m.format_version
            )));
        }
        if m.trees.len() != m.params.n_trees {
            return Err(EnsembleError::Blob("tree count differs from params".into()));
        }
        Ok(m)
    }

    pub fn blob_digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gini_identities() {
        assert_eq!(gini(&[5.0, 5.0]), 0.5);
        assert_eq!(gini(&[7.0, 0.0]), 0.0);
        assert_eq!(gini(&[]), 0.0);
    }

    #[test]
    fn one_dimensional_split() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let y = [0, 0, 1, 1];
        let t = fit_tree(
            &x,
            Target::Classes(&y),
            None,
            &TreeParams::cart(None),
            &mut tree_rng(0, 0),
        )
        .unwrap();
        let s = t.nodes[0].split.unwrap();
        assert!(s.threshold > 2.0 && s.threshold < 3.0);
        for (r, &c) in y.iter().enumerate() {
            assert_eq!(argmax_first(&t.leaf(x.row(r)).value) as u32, c);
        }
    }

    #[test]
    fn constant_labels_give_single_leaf() {
        let x = Matrix::from_rows(&[vec![1.0, 3.0], vec![2.0, 1.0], vec![3.0, 2.0]]);
        let mut p = ForestParams::new(Variant::ExtraTrees, Task::Classification);
        p.n_trees = 5;
        let m = fit_forest(&x, Target::Classes(&[1, 1, 1]), &p, "h").unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
        let q = Matrix::from_rows(&[vec![-100.0, 100.0]]);
        assert_eq!(m.predict(&q).unwrap(), vec![1]);
        assert_eq!(m.feature_importance(), vec![0.0, 0.0]);
    }

    #[test]
    fn empty_and_mismatch_rejected() {
        let x = Matrix::zeros(0, 2);
        let p = ForestParams::new(Variant::RandomForest, Task::Classification);
        assert_eq!(
            fit_forest(&x, Target::Classes(&[]), &p, "").unwrap_err(),
            EnsembleError::Empty
        );
        let x = Matrix::zeros(2, 2);
        assert!(matches!(
            fit_forest(&x, Target::Classes(&[0]), &p, ""),
            Err(EnsembleError::LabelCount { .. })
        ));
        let mut p0 = p.clone();
        p0.n_trees = 0;
        assert!(matches!(
            fit_forest(&x, Target::Classes(&[0, 1]), &p0, ""),
            Err(EnsembleError::Params(_))
        ));
    }

    #[test]
    fn single_tree_forest_matches_traversal() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i * 7 % 13) as f64, (i % 5) as f64]).collect();
        let y: Vec<u32> = (0..40).map(|i| ((i * 7 % 13) > 6) as u32).collect();
        let x = Matrix::from_rows(&rows);
        let mut p = ForestParams::new(Variant::ExtraTrees, Task::Classification);
        p.n_trees = 1;
        let m = fit_forest(&x, Target::Classes(&y), &p, "").unwrap();
        let pred = m.predict(&x).unwrap();
        for r in 0..40 {
            assert_eq!(pred[r], argmax_first(&m.trees[0].leaf(x.row(r)).value) as u32);
        }
    }

    #[test]
    fn regression_thresholds_scores() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..30).map(|i| if i < 15 { 10.0 } else { 60.0 }).collect();
        let x = Matrix::from_rows(&rows);
        let mut p = ForestParams::new(Variant::RandomForest, Task::Regression);
        p.n_trees = 20;
        let m = fit_forest(&x, Target::Values(&y), &p, "").unwrap();
        let q = Matrix::from_rows(&[vec![2.0], vec![27.0]]);
        assert_eq!(m.predict(&q).unwrap(), vec![0, 1]);
        let s = m.predict_scores(&q).unwrap();
        assert!(s[0] < 40.0 && s[1] >= 40.0);
    }

    #[test]
    fn blob_round_trip_exact() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64).sqrt()])
            .collect();
        let y: Vec<u32> = (0..50).map(|i| (i % 3 == 0) as u32).collect();
        let x = Matrix::from_rows(&rows);
        let mut p = ForestParams::new(Variant::RandomForest, Task::Classification);
        p.n_trees = 7;
        let m = fit_forest(&x, Target::Classes(&y), &p, "abc").unwrap();
        let back = ForestModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), m.to_bytes());
    }
}
