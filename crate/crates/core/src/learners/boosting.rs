//! Gradient boosting for binary classification under logistic loss.
//!
//! Each round fits a squared-error regression tree to the negative gradient
//! `y - p` and sets leaf values by a single Newton step.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::tree::{check_xy, midpoint, TIE_EPS};
use crate::error::{Error, Result};
use crate::stats::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostingConfig {
    pub rounds: usize,
    pub depth: usize,
    pub rate: f64,
}

impl Default for BoostingConfig {
    fn default() -> Self {
        BoostingConfig { rounds: 100, depth: 3, rate: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegNode {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: Box<RegNode>, right: Box<RegNode> },
}

impl RegNode {
    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        let mut node = self;
        loop {
            match node {
                RegNode::Leaf(v) => return *v,
                RegNode::Split { feature, threshold, left, right } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoosting {
    pub init: f64,
    pub rate: f64,
    pub trees: Vec<RegNode>,
    pub importances: Vec<f64>,
}

impl GradientBoosting {
    pub fn decision(&self, row: ArrayView1<f64>) -> f64 {
        self.init + self.rate * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| sigmoid(self.decision(r))).collect()
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        x.rows().into_iter().map(|r| u8::from(self.decision(r) > 0.0)).collect()
    }
}

struct RegBuilder<'a> {
    x: &'a Array2<f64>,
    resid: &'a [f64],
    hess: &'a [f64],
    max_depth: usize,
    importances: &'a mut [f64],
    n_root: f64,
}

impl RegBuilder<'_> {
    fn leaf(&self, rows: &[usize]) -> RegNode {
        let num: f64 = rows.iter().map(|&r| self.resid[r]).sum();
        let den: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        RegNode::Leaf(if den > 1e-12 { num / den } else { 0.0 })
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> RegNode {
        let n = rows.len();
        if depth >= self.max_depth || n < 2 {
            return self.leaf(rows);
        }
        let total: f64 = rows.iter().map(|&r| self.resid[r]).sum();
        let sq: f64 = rows.iter().map(|&r| self.resid[r] * self.resid[r]).sum();
        let parent_sse = sq - total * total / n as f64;
        // maximize SL²/nL + SR²/nR, equivalently minimize child SSE
        let mut best: Option<(usize, f64, f64)> = None;
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
        for f in 0..self.x.ncols() {
            pairs.clear();
            pairs.extend(rows.iter().map(|&r| (self.x[[r, f]], self.resid[r])));
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = 0.0;
            for i in 0..n - 1 {
                left += pairs[i].1;
                if pairs[i].0 == pairs[i + 1].0 {
                    continue;
                }
                let nl = (i + 1) as f64;
                let nr = (n - i - 1) as f64;
                let right = total - left;
                let child_sse = sq - left * left / nl - right * right / nr;
                if best.is_none_or(|b| child_sse < b.2 - TIE_EPS) {
                    best = Some((f, midpoint(pairs[i].0, pairs[i + 1].0), child_sse));
                }
            }
        }
        let Some((feature, threshold, child_sse)) = best else {
            return self.leaf(rows);
        };
        if child_sse >= parent_sse - TIE_EPS {
            return self.leaf(rows);
        }
        self.importances[feature] += (parent_sse - child_sse) / self.n_root;
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[[i, feature]] <= threshold);
        RegNode::Split {
            feature,
            threshold,
            left: Box::new(self.build(&l, depth + 1)),
            right: Box::new(self.build(&r, depth + 1)),
        }
    }
}

pub fn fit_gradient_boosting(x: &Array2<f64>, y: &[u8], config: &BoostingConfig) -> Result<GradientBoosting> {
    check_xy(x, y)?;
    if !(config.rate > 0.0) || config.depth == 0 {
        return Err(Error::InvalidArgument("boosting needs positive rate and depth".into()));
    }
    let (n, p) = x.dim();
    let pos = y.iter().filter(|&&v| v == 1).count() as f64;
    let prior = ((pos + 0.5) / (n as f64 + 1.0)).clamp(1e-6, 1.0 - 1e-6);
    let init = (prior / (1.0 - prior)).ln();
    let mut f = vec![init; n];
    let mut importances = vec![0.0; p];
    let mut trees = Vec::with_capacity(config.rounds);
    let rows: Vec<usize> = (0..n).collect();
    for _ in 0..config.rounds {
        let prob: Vec<f64> = f.iter().map(|&v| sigmoid(v)).collect();
        let resid: Vec<f64> = prob.iter().zip(y).map(|(q, &t)| t as f64 - q).collect();
        let hess: Vec<f64> = prob.iter().map(|q| q * (1.0 - q)).collect();
        let mut b = RegBuilder {
            x,
            resid: &resid,
            hess: &hess,
            max_depth: config.depth,
            importances: &mut importances,
            n_root: n as f64,
        };
        let tree = b.build(&rows, 0);
        for (i, fi) in f.iter_mut().enumerate() {
            *fi += config.rate * tree.predict_row(x.row(i));
        }
        trees.push(tree);
    }
    Ok(GradientBoosting { init, rate: config.rate, trees, importances })
}
