//! Random forests and stratified grid-search cross-validation.

use log::warn;
use ndarray::{Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{check_xy, fit_tree_indexed, ColumnIndex, Criterion, DecisionTree, TreeParams};
use crate::error::{Error, Result};
use crate::eval::{stratified_folds, weighted_f1};
use crate::rng::{derive_seed, derived_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_estimators: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// `None` grows trees until the other stopping rules apply.
    pub max_depth: Option<usize>,
    pub criterion: Criterion,
    /// Candidate features per split; `None` means `ceil(sqrt(p))`.
    pub max_features: Option<usize>,
    /// Disabling bootstrap trains every tree on all rows.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_estimators: 100,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_depth: None,
            criterion: Criterion::Gini,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0
            || self.min_samples_split == 0
            || self.min_samples_leaf == 0
            || self.max_depth == Some(0)
            || self.max_features == Some(0)
        {
            return Err(Error::Config(format!("forest parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn features_per_split(&self, p: usize) -> usize {
        self.max_features.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p.max(1))
    }

    fn tree_params(&self, p: usize, tree: usize) -> TreeParams {
        TreeParams {
            criterion: self.criterion,
            max_depth: self.max_depth.unwrap_or(usize::MAX),
            min_samples_split: self.min_samples_split,
            min_samples_leaf: self.min_samples_leaf,
            max_features: Some(self.features_per_split(p)),
            seed: derive_seed(self.seed, &[tree as u64, 1]),
        }
    }
}

/// The 72-point hyperparameter grid, in canonical order.
pub fn paper_grid(seed: u64) -> Vec<ForestConfig> {
    let mut grid = Vec::with_capacity(72);
    for n_estimators in [100, 200, 500] {
        for min_samples_split in [8, 10] {
            for min_samples_leaf in [3, 4, 5] {
                for max_depth in [80, 90] {
                    for criterion in [Criterion::Gini, Criterion::Entropy] {
                        grid.push(ForestConfig {
                            n_estimators,
                            min_samples_split,
                            min_samples_leaf,
                            max_depth: Some(max_depth),
                            criterion,
                            max_features: None,
                            bootstrap: true,
                            seed,
                        });
                    }
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub config: ForestConfig,
    pub trees: Vec<DecisionTree>,
    pub n_features: usize,
}

impl RandomForest {
    pub fn fit(x: &Array2<f64>, y: &[u8], config: &ForestConfig) -> Result<Self> {
        fit_random_forest(x, y, config)
    }

    /// Summed per-tree class-probability vectors for every row.
    pub fn vote_sums(&self, x: &Array2<f64>) -> Vec<[f64; 2]> {
        x.axis_iter(Axis(0))
            .map(|row| {
                self.trees.iter().fold([0.0, 0.0], |acc, t| {
                    let p = t.predict_proba_row(row);
                    [acc[0] + p[0], acc[1] + p[1]]
                })
            })
            .collect()
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Vec<f64> {
        let k = self.trees.len() as f64;
        self.vote_sums(x).into_iter().map(|s| s[1] / k).collect()
    }

    /// Class 1 iff its summed probability strictly exceeds class 0's.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        self.vote_sums(x).into_iter().map(|s| u8::from(s[1] > s[0])).collect()
    }

    /// Mean of per-tree importances, each normalized to sum 1.
    pub fn importances(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_features];
        for t in &self.trees {
            let s: f64 = t.importances.iter().sum();
            if s > 0.0 {
                for (a, v) in acc.iter_mut().zip(&t.importances) {
                    *a += v / s;
                }
            }
        }
        let k = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }
}

pub fn fit_random_forest(x: &Array2<f64>, y: &[u8], config: &ForestConfig) -> Result<RandomForest> {
    check_xy(x, y)?;
    config.validate()?;
    let (n, p) = x.dim();
    let index = ColumnIndex::new(x);
    let trees = (0..config.n_estimators)
        .into_par_iter()
        .map(|t| fit_tree_indexed(&index, y, &bootstrap_rows(config, n, t), &config.tree_params(p, t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RandomForest { config: *config, trees, n_features: p })
}

fn bootstrap_rows(config: &ForestConfig, n: usize, tree: usize) -> Vec<usize> {
    if config.bootstrap {
        let mut rng = derived_rng(config.seed, &[tree as u64, 0]);
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    }
}

/// Grid entries that differ only in `n_estimators` and `max_depth`.
fn same_family(a: &ForestConfig, b: &ForestConfig) -> bool {
    ForestConfig { n_estimators: 1, max_depth: None, ..*a } == ForestConfig { n_estimators: 1, max_depth: None, ..*b }
}

/// Test-fold predictions of every member of one family.
///
/// Tree `t` depends only on the seed and `t`, so smaller forests are prefixes
/// of larger ones. A tree grown under a deeper limit that never reached a
/// shallower one is also the tree grown under the shallower limit.
fn family_predictions(
    grid: &[ForestConfig],
    members: &[usize],
    xt: &Array2<f64>,
    yt: &[u8],
    xv: &Array2<f64>,
) -> Result<Vec<(usize, Vec<u8>)>> {
    let (n, p) = xt.dim();
    let mut depths: Vec<Option<usize>> = members.iter().map(|&c| grid[c].max_depth).collect();
    depths.sort_by(|a, b| b.unwrap_or(usize::MAX).cmp(&a.unwrap_or(usize::MAX)));
    depths.dedup();
    let limit = |d: Option<usize>| d.unwrap_or(usize::MAX);
    let total = members.iter().map(|&c| grid[c].n_estimators).max().unwrap_or(0);
    let base = grid[members[0]];
    let mut votes = vec![vec![[0.0f64; 2]; xv.nrows()]; depths.len()];
    let mut out = Vec::with_capacity(members.len());
    let index = ColumnIndex::new(xt);
    for t in 0..total {
        let rows = bootstrap_rows(&base, n, t);
        let mut prev: Option<DecisionTree> = None;
        for (k, &d) in depths.iter().enumerate() {
            let tree = match prev {
                Some(tree) if tree.root.depth() < limit(d) => tree,
                _ => fit_tree_indexed(&index, yt, &rows, &ForestConfig { max_depth: d, ..base }.tree_params(p, t))?,
            };
            for (v, row) in votes[k].iter_mut().zip(xv.axis_iter(Axis(0))) {
                let q = tree.predict_proba_row(row);
                *v = [v[0] + q[0], v[1] + q[1]];
            }
            prev = Some(tree);
        }
        for &c in members.iter().filter(|&&c| grid[c].n_estimators == t + 1) {
            let k = depths.iter().position(|&d| d == grid[c].max_depth).expect("depth listed");
            out.push((c, votes[k].iter().map(|s| u8::from(s[1] > s[0])).collect()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: ForestConfig,
    pub best_score: f64,
    /// Mean CV weighted F1 per grid entry, in grid order.
    pub scores: Vec<f64>,
    pub folds: usize,
    pub folds_used: usize,
}

/// Stratified k-fold grid search; the best configuration maximizes mean
/// weighted F1 with ties going to the earliest grid entry.
pub fn grid_search_cv(
    grid: &[ForestConfig],
    x: &Array2<f64>,
    y: &[u8],
    folds: usize,
    seed: u64,
) -> Result<GridSearchResult> {
    check_xy(x, y)?;
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    for c in grid {
        c.validate()?;
    }
    let assignment = stratified_folds(y, folds, seed)?;
    let mut splits = Vec::new();
    for k in 0..folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] != k).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] == k).collect();
        let ones = train.iter().filter(|&&i| y[i] == 1).count();
        if test.is_empty() || ones == 0 || ones == train.len() {
            warn!("fold {k} skipped: a class is absent from its training part");
            continue;
        }
        let yt: Vec<u8> = train.iter().map(|&i| y[i]).collect();
        let yv: Vec<u8> = test.iter().map(|&i| y[i]).collect();
        splits.push((x.select(Axis(0), &train), yt, x.select(Axis(0), &test), yv));
    }
    if splits.is_empty() {
        return Err(Error::InvalidArgument("every CV fold was skipped".into()));
    }
    let mut families: Vec<Vec<usize>> = Vec::new();
    for c in 0..grid.len() {
        match families.iter_mut().find(|f| same_family(&grid[f[0]], &grid[c])) {
            Some(f) => f.push(c),
            None => families.push(vec![c]),
        }
    }
    let jobs: Vec<(usize, usize)> =
        (0..families.len()).flat_map(|g| (0..splits.len()).map(move |f| (g, f))).collect();
    let per_job = jobs
        .par_iter()
        .map(|&(g, f)| {
            let (xt, yt, xv, yv) = &splits[f];
            family_predictions(grid, &families[g], xt, yt, xv)?
                .into_iter()
                .map(|(c, pred)| Ok((c, f, weighted_f1(yv, &pred)?.weighted_f1)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let m = splits.len();
    let mut fold_scores = vec![vec![0.0; m]; grid.len()];
    for (c, f, score) in per_job.into_iter().flatten() {
        fold_scores[c][f] = score;
    }
    let scores: Vec<f64> = fold_scores.iter().map(|s| s.iter().sum::<f64>() / m as f64).collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(GridSearchResult { best: grid[best], best_score: scores[best], scores, folds, folds_used: m })
}
