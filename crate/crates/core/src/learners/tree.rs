//! CART classification trees for binary labels.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Gains closer than this are treated as ties.
pub const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Gini,
    Entropy,
}

/// Impurity of a node holding `c0` and `c1` samples of each class.
/// Entropy uses natural logarithms.
pub fn impurity(criterion: Criterion, c0: usize, c1: usize) -> f64 {
    let n = (c0 + c1) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (p0, p1) = (c0 as f64 / n, c1 as f64 / n);
    match criterion {
        Criterion::Gini => 1.0 - p0 * p0 - p1 * p1,
        Criterion::Entropy => {
            let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
            h(p0) + h(p1)
        }
    }
}

/// Weighted child impurity of a candidate split.
pub fn split_score(criterion: Criterion, left: (usize, usize), right: (usize, usize)) -> f64 {
    let nl = left.0 + left.1;
    let nr = right.0 + right.1;
    (nl as f64 * impurity(criterion, left.0, left.1) + nr as f64 * impurity(criterion, right.0, right.1))
        / (nl + nr) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub criterion: Criterion,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Candidate features per node; `None` uses all of them.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            criterion: Criterion::Gini,
            max_depth: usize::MAX,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// `proba` holds the Laplace-smoothed class probabilities.
    Leaf { proba: [f64; 2], n: usize },
    Split { feature: usize, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    /// Weighted child impurity.
    pub score: f64,
}

/// Exhaustive best split of `rows` over `features`, scanning features and
/// thresholds in ascending order. A candidate replaces the incumbent only if
/// its score is lower by more than [`TIE_EPS`], so ties go to the lower
/// feature index and then the lower threshold.
pub fn best_split(
    x: &Array2<f64>,
    y: &[u8],
    rows: &[usize],
    features: &[usize],
    criterion: Criterion,
    min_samples_leaf: usize,
) -> Option<SplitChoice> {
    let index = ColumnIndex::new(x);
    best_split_in(&index, y, rows, features, criterion, min_samples_leaf, &mut Vec::new())
}

/// Column-major view of a design matrix with per-column dense ranks, built
/// once and shared by every tree fitted on the matrix.
#[derive(Debug, Clone)]
pub struct ColumnIndex {
    cols: Vec<Vec<f64>>,
    ranks: Vec<Vec<u32>>,
    /// Distinct values of each column in ascending order.
    levels: Vec<Vec<f64>>,
}

impl ColumnIndex {
    pub fn new(x: &Array2<f64>) -> Self {
        let cols: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.iter().copied().collect()).collect();
        let mut ranks = Vec::with_capacity(cols.len());
        let mut levels = Vec::with_capacity(cols.len());
        for col in &cols {
            let mut order: Vec<usize> = (0..col.len()).collect();
            order.sort_unstable_by(|&a, &b| col[a].total_cmp(&col[b]));
            let mut rank = vec![0u32; col.len()];
            let mut lv: Vec<f64> = Vec::new();
            for &i in &order {
                if lv.last() != Some(&col[i]) {
                    lv.push(col[i]);
                }
                rank[i] = (lv.len() - 1) as u32;
            }
            ranks.push(rank);
            levels.push(lv);
        }
        ColumnIndex { cols, ranks, levels }
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }
}

fn best_split_in(
    index: &ColumnIndex,
    y: &[u8],
    rows: &[usize],
    features: &[usize],
    criterion: Criterion,
    min_samples_leaf: usize,
    keys: &mut Vec<u64>,
) -> Option<SplitChoice> {
    let n = rows.len();
    let total1: usize = rows.iter().map(|&r| y[r] as usize).sum();
    let total0 = n - total1;
    let mut best: Option<SplitChoice> = None;
    for &f in features {
        let (rank, levels) = (&index.ranks[f], &index.levels[f]);
        keys.clear();
        keys.extend(rows.iter().map(|&r| (u64::from(rank[r]) << 1) | u64::from(y[r])));
        keys.sort_unstable();
        let (mut l0, mut l1) = (0usize, 0usize);
        for i in 0..n.saturating_sub(1) {
            if keys[i] & 1 == 0 {
                l0 += 1;
            } else {
                l1 += 1;
            }
            let (v, next) = (keys[i] >> 1, keys[i + 1] >> 1);
            if v == next {
                continue;
            }
            let nl = i + 1;
            if nl < min_samples_leaf || n - nl < min_samples_leaf {
                continue;
            }
            let score = split_score(criterion, (l0, l1), (total0 - l0, total1 - l1));
            if best.is_none_or(|b| score < b.score - TIE_EPS) {
                let threshold = midpoint(levels[v as usize], levels[next as usize]);
                best = Some(SplitChoice { feature: f, threshold, score });
            }
        }
    }
    best
}

/// Midpoint that is guaranteed to send `lo` left and `hi` right.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub root: TreeNode,
    pub n_features: usize,
    /// Impurity decrease per feature, weighted by node size over root size.
    pub importances: Vec<f64>,
}

impl DecisionTree {
    pub fn predict_proba_row(&self, row: ArrayView1<f64>) -> [f64; 2] {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { proba, .. } => return *proba,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    /// Probability of class 1 for every row.
    pub fn predict_proba(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.predict_proba_row(r)[1]).collect()
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.rows()
            .into_iter()
            .map(|r| {
                let p = self.predict_proba_row(r);
                u8::from(p[1] > p[0])
            })
            .collect()
    }

    pub fn to_dot(&self, feature_names: &[String]) -> String {
        let mut s = String::from("digraph tree {\n  node [shape=box];\n");
        let mut next = 0usize;
        dot_node(&self.root, feature_names, &mut s, &mut next);
        s.push_str("}\n");
        s
    }
}

fn dot_node(node: &TreeNode, names: &[String], s: &mut String, next: &mut usize) -> usize {
    let id = *next;
    *next += 1;
    match node {
        TreeNode::Leaf { proba, n } => {
            let _ = writeln!(s, "  n{id} [label=\"n={n}\\np1={:.3}\"];", proba[1]);
        }
        TreeNode::Split { feature, threshold, left, right } => {
            let name = names.get(*feature).cloned().unwrap_or_else(|| format!("x{feature}"));
            let _ = writeln!(
                s,
                "  n{id} [label=\"{} <= {threshold:.4}\"];",
                crate::netinfer::escape(&name)
            );
            let l = dot_node(left, names, s, next);
            let _ = writeln!(s, "  n{id} -> n{l} [label=\"true\"];");
            let r = dot_node(right, names, s, next);
            let _ = writeln!(s, "  n{id} -> n{r} [label=\"false\"];");
        }
    }
    id
}

pub(crate) fn check_xy(x: &Array2<f64>, y: &[u8]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if x.nrows() == 0 {
        return Err(Error::EmptyTable("no training rows".into()));
    }
    if let Some(&l) = y.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {l} is not binary")));
    }
    Ok(())
}

struct Builder<'a> {
    index: &'a ColumnIndex,
    keys: Vec<u64>,
    y: &'a [u8],
    params: TreeParams,
    rng: ChaCha8Rng,
    importances: Vec<f64>,
    n_root: f64,
    all_features: Vec<usize>,
}

impl Builder<'_> {
    fn features(&mut self) -> Vec<usize> {
        let p = self.all_features.len();
        match self.params.max_features {
            Some(k) if k < p => {
                let mut f = sample(&mut self.rng, p, k.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => self.all_features.clone(),
        }
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> TreeNode {
        let n = rows.len();
        let c1: usize = rows.iter().map(|&r| self.y[r] as usize).sum();
        let c0 = n - c1;
        let leaf = TreeNode::Leaf {
            proba: [(c0 as f64 + 1.0) / (n as f64 + 2.0), (c1 as f64 + 1.0) / (n as f64 + 2.0)],
            n,
        };
        let parent = impurity(self.params.criterion, c0, c1);
        if depth >= self.params.max_depth
            || n < self.params.min_samples_split
            || n < 2 * self.params.min_samples_leaf
            || parent == 0.0
        {
            return leaf;
        }
        let features = self.features();
        let Some(split) = best_split_in(
            self.index,
            self.y,
            rows,
            &features,
            self.params.criterion,
            self.params.min_samples_leaf,
            &mut self.keys,
        ) else {
            return leaf;
        };
        if split.score >= parent - TIE_EPS {
            return leaf;
        }
        self.importances[split.feature] += n as f64 / self.n_root * (parent - split.score);
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| self.index.cols[split.feature][r] <= split.threshold);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(self.build(&left, depth + 1)),
            right: Box::new(self.build(&right, depth + 1)),
        }
    }
}

pub fn fit_decision_tree(x: &Array2<f64>, y: &[u8], params: &TreeParams) -> Result<DecisionTree> {
    let rows: Vec<usize> = (0..x.nrows()).collect();
    fit_tree_on_rows(x, y, &rows, params)
}

/// Fits on a multiset of row indices (bootstrap samples repeat rows).
pub fn fit_tree_on_rows(x: &Array2<f64>, y: &[u8], rows: &[usize], params: &TreeParams) -> Result<DecisionTree> {
    check_xy(x, y)?;
    fit_tree_indexed(&ColumnIndex::new(x), y, rows, params)
}

/// [`fit_tree_on_rows`] on a prebuilt index; `y` must match its rows.
pub fn fit_tree_indexed(index: &ColumnIndex, y: &[u8], rows: &[usize], params: &TreeParams) -> Result<DecisionTree> {
    if params.min_samples_leaf == 0 {
        return Err(Error::InvalidArgument("min_samples_leaf must be positive".into()));
    }
    if rows.is_empty() {
        return Err(Error::EmptyTable("tree fit on zero rows".into()));
    }
    let p = index.n_features();
    let mut b = Builder {
        index,
        keys: Vec::with_capacity(rows.len()),
        y,
        params: *params,
        rng: rng_from_seed(params.seed),
        importances: vec![0.0; p],
        n_root: rows.len() as f64,
        all_features: (0..p).collect(),
    };
    let root = b.build(rows, 0);
    Ok(DecisionTree { root, n_features: p, importances: b.importances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;
    use ndarray::array;
    use rand::Rng;

    /// Direct enumeration of every (feature, midpoint) candidate with counts
    /// taken by filtering.
    fn brute_force(x: &Array2<f64>, y: &[u8], criterion: Criterion, min_leaf: usize) -> Option<SplitChoice> {
        let mut best: Option<SplitChoice> = None;
        for f in 0..x.ncols() {
            let mut vals: Vec<f64> = x.column(f).to_vec();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = midpoint(w[0], w[1]);
                let mut l = (0, 0);
                let mut r = (0, 0);
                for i in 0..x.nrows() {
                    let side = if x[[i, f]] <= t { &mut l } else { &mut r };
                    if y[i] == 0 {
                        side.0 += 1;
                    } else {
                        side.1 += 1;
                    }
                }
                if l.0 + l.1 < min_leaf || r.0 + r.1 < min_leaf {
                    continue;
                }
                let score = split_score(criterion, l, r);
                let better = match best {
                    None => true,
                    Some(b) => score < b.score - TIE_EPS,
                };
                if better {
                    best = Some(SplitChoice { feature: f, threshold: t, score });
                }
            }
        }
        best
    }

    #[test]
    fn impurity_of_balanced_node() {
        assert_eq!(impurity(Criterion::Gini, 5, 5), 0.5);
        assert!((impurity(Criterion::Entropy, 5, 5) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(impurity(Criterion::Gini, 4, 0), 0.0);
    }

    #[test]
    fn pure_input_is_a_leaf() {
        let t = fit_decision_tree(&array![[1.0], [2.0]], &[1, 1], &TreeParams::default()).unwrap();
        assert!(matches!(t.root, TreeNode::Leaf { n: 2, .. }));
    }

    #[test]
    fn one_dimensional_threshold() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let t = fit_decision_tree(&x, &[0, 0, 1, 1], &TreeParams::default()).unwrap();
        match t.root {
            TreeNode::Split { feature, threshold, .. } => assert_eq!((feature, threshold), (0, 1.5)),
            _ => panic!("expected split"),
        }
        assert_eq!(t.predict(&x), vec![0, 0, 1, 1]);
        assert_eq!(t.importances, vec![0.5]);
    }

    #[test]
    fn matches_brute_force_on_random_data() {
        let mut rng = derived_rng(42, &[]);
        for case in 0..200 {
            let n = rng.random_range(2..=10);
            let p = rng.random_range(1..=3);
            let x = Array2::from_shape_fn((n, p), |_| rng.random_range(0..5) as f64);
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let crit = if case % 2 == 0 { Criterion::Gini } else { Criterion::Entropy };
            let min_leaf = 1 + case % 2;
            let rows: Vec<usize> = (0..n).collect();
            let feats: Vec<usize> = (0..p).collect();
            assert_eq!(best_split(&x, &y, &rows, &feats, crit, min_leaf), brute_force(&x, &y, crit, min_leaf));
        }
    }

    #[test]
    fn leaves_are_laplace_smoothed() {
        let t = fit_decision_tree(&array![[0.0], [1.0], [2.0]], &[0, 0, 0], &TreeParams::default()).unwrap();
        assert_eq!(t.predict_proba_row(array![5.0].view()), [0.8, 0.2]);
    }

    #[test]
    fn stopping_rules() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let y = [0, 1, 0, 1];
        let stump = TreeParams { max_depth: 1, ..TreeParams::default() };
        assert!(fit_decision_tree(&x, &y, &stump).unwrap().root.depth() <= 1);
        let big_leaf = TreeParams { min_samples_leaf: 2, ..TreeParams::default() };
        assert!(fit_decision_tree(&x, &y, &big_leaf).unwrap().root.n_leaves() <= 2);
        let no_split = TreeParams { min_samples_split: 5, ..TreeParams::default() };
        assert_eq!(fit_decision_tree(&x, &y, &no_split).unwrap().root.n_leaves(), 1);
    }

    #[test]
    fn dot_export_mentions_features() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let t = fit_decision_tree(&x, &[0, 0, 1, 1], &TreeParams::default()).unwrap();
        let dot = t.to_dot(&["otuA".to_string()]);
        assert!(dot.starts_with("digraph tree {") && dot.contains("otuA <= 1.5000"));
    }
}
