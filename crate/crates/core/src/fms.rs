//! Full model selection: a squared-error regression tree over the
//! preprocessing grid (augmentation flag, NM index, taxonomic level) that
//! explains weighted F1.

use std::fmt::Write as _;
use std::io::BufRead;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::TaxonomicLevel;
use crate::error::{Error, Result};
use crate::netinfer::escape;

pub const N_NM: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmsRecord {
    pub aug: u8,
    pub nm_index: usize,
    pub level: TaxonomicLevel,
    pub weighted_f1: f64,
}

impl FmsRecord {
    pub fn validate(&self) -> Result<()> {
        if self.aug > 1 || !(1..=N_NM).contains(&self.nm_index) {
            return Err(Error::InvalidArgument(format!("bad record aug={} nm={}", self.aug, self.nm_index)));
        }
        if !(0.0..=1.0).contains(&self.weighted_f1) {
            return Err(Error::InvalidArgument(format!("weighted F1 {} outside [0,1]", self.weighted_f1)));
        }
        Ok(())
    }

    /// One-hot encoding in [`feature_names`] order.
    pub fn features(&self) -> Vec<f64> {
        let mut v = vec![0.0; 1 + N_NM + TaxonomicLevel::ALL.len()];
        v[0] = f64::from(self.aug);
        v[self.nm_index] = 1.0;
        v[1 + N_NM + self.level.index()] = 1.0;
        v
    }
}

/// `Aug`, `NM_1`..`NM_20`, `Phylum`..`Genus`.
pub fn feature_names() -> Vec<String> {
    let mut names = vec!["Aug".to_string()];
    names.extend((1..=N_NM).map(|k| format!("NM_{k}")));
    names.extend(TaxonomicLevel::ALL.iter().map(|l| l.name().to_string()));
    names
}

/// Reads records from JSONL. Lines without a numeric `weighted_f1` (failed or
/// skipped cells) are excluded and counted.
pub fn read_records<R: BufRead>(reader: R) -> Result<(Vec<FmsRecord>, usize)> {
    let mut records = Vec::new();
    let mut excluded = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if !v.get("weighted_f1").is_some_and(|f| f.is_number()) {
            excluded += 1;
            continue;
        }
        let rec: FmsRecord = serde_json::from_value(v)
            .map_err(|e| Error::Ingest(format!("line {}: {e}", i + 1)))?;
        rec.validate()?;
        records.push(rec);
    }
    if excluded > 0 {
        warn!("excluded {excluded} records without a weighted F1");
    }
    Ok((records, excluded))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeLimits {
    pub max_depth: usize,
    pub min_split: usize,
    pub min_leaf: usize,
}

impl Default for TreeLimits {
    fn default() -> Self {
        TreeLimits { max_depth: 4, min_split: 2, min_leaf: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegNode {
    pub depth: usize,
    pub n: usize,
    pub coverage: f64,
    pub mean: f64,
    /// `(feature, threshold, left, right)`; rows with `x <= threshold` go left.
    pub split: Option<(usize, f64, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub feature_names: Vec<String>,
    /// Arena of nodes, root first.
    pub nodes: Vec<RegNode>,
}

fn mean_of(y: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64
}

/// Σ (y - ȳ)² over `rows`, two-pass.
pub fn sse(y: &[f64], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let m = mean_of(y, rows);
    rows.iter().map(|&r| (y[r] - m) * (y[r] - m)).sum()
}

/// Candidate thresholds for one feature: midpoints of consecutive distinct
/// values among `rows`.
pub fn thresholds(x: &[Vec<f64>], rows: &[usize], feature: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = rows.iter().map(|&r| x[r][feature]).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    vals.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect()
}

/// Best `(feature, threshold, child_sse)` under the leaf-size limit. Ties keep
/// the earliest candidate (lowest feature, then lowest threshold).
pub fn best_regression_split(x: &[Vec<f64>], y: &[f64], rows: &[usize], min_leaf: usize) -> Option<(usize, f64, f64)> {
    let p = x.first().map_or(0, Vec::len);
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..p {
        for t in thresholds(x, rows, f) {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][f] <= t);
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let score = sse(y, &l) + sse(y, &r);
            if best.is_none_or(|b| score < b.2) {
                best = Some((f, t, score));
            }
        }
    }
    best
}

/// Relative improvement below which a node is not split.
const MIN_GAIN: f64 = 1e-12;

pub fn fit_regression_tree(x: &[Vec<f64>], y: &[f64], names: &[String], limits: &TreeLimits) -> Result<RegressionTree> {
    if y.is_empty() || x.len() != y.len() {
        return Err(Error::Shape(format!("{} feature rows and {} targets", x.len(), y.len())));
    }
    if x.iter().any(|r| r.len() != names.len()) {
        return Err(Error::Shape("feature rows do not match the feature names".into()));
    }
    if limits.min_leaf == 0 {
        return Err(Error::InvalidArgument("min_leaf must be at least 1".into()));
    }
    let mut tree = RegressionTree { feature_names: names.to_vec(), nodes: Vec::new() };
    let all: Vec<usize> = (0..y.len()).collect();
    grow(&mut tree, x, y, &all, 0, limits);
    Ok(tree)
}

fn grow(tree: &mut RegressionTree, x: &[Vec<f64>], y: &[f64], rows: &[usize], depth: usize, limits: &TreeLimits) -> usize {
    let id = tree.nodes.len();
    let total = y.len() as f64;
    tree.nodes.push(RegNode {
        depth,
        n: rows.len(),
        coverage: rows.len() as f64 / total,
        mean: mean_of(y, rows),
        split: None,
    });
    if depth >= limits.max_depth || rows.len() < limits.min_split {
        return id;
    }
    let parent = sse(y, rows);
    let Some((f, t, child)) = best_regression_split(x, y, rows, limits.min_leaf) else {
        return id;
    };
    if parent - child <= MIN_GAIN * parent.max(1.0) {
        return id;
    }
    let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][f] <= t);
    let left = grow(tree, x, y, &l, depth + 1, limits);
    let right = grow(tree, x, y, &r, depth + 1, limits);
    tree.nodes[id].split = Some((f, t, left, right));
    id
}

pub fn fit_fms_tree(records: &[FmsRecord], limits: &TreeLimits) -> Result<RegressionTree> {
    if records.is_empty() {
        return Err(Error::EmptyTable("no FMS records".into()));
    }
    for r in records {
        r.validate()?;
    }
    let x: Vec<Vec<f64>> = records.iter().map(FmsRecord::features).collect();
    let y: Vec<f64> = records.iter().map(|r| r.weighted_f1).collect();
    fit_regression_tree(&x, &y, &feature_names(), limits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Text,
    Dot,
}

impl RegressionTree {
    pub fn root(&self) -> &RegNode {
        &self.nodes[0]
    }

    pub fn leaves(&self) -> impl Iterator<Item = &RegNode> {
        self.nodes.iter().filter(|n| n.split.is_none())
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut node = &self.nodes[0];
        while let Some((f, t, l, r)) = node.split {
            node = &self.nodes[if row[f] <= t { l } else { r }];
        }
        node.mean
    }

    /// Condition text for the left (`true`) and right branch of a split.
    /// Indicator features at 0.5 read as `F = 0` / `F = 1`.
    fn conditions(&self, feature: usize, threshold: f64) -> (String, String) {
        let name = &self.feature_names[feature];
        if threshold == 0.5 {
            (format!("{name} = 0"), format!("{name} = 1"))
        } else {
            (format!("{name} <= {threshold:.4}"), format!("{name} > {threshold:.4}"))
        }
    }

    fn label(node: &RegNode) -> String {
        format!("{:.1}% | mean={:.3}", 100.0 * node.coverage, node.mean)
    }

    pub fn export(&self, format: ExportFormat) -> String {
        match format {
            ExportFormat::Text => {
                let mut s = String::new();
                self.text_node(0, None, &mut s);
                s
            }
            ExportFormat::Dot => {
                let mut s = String::from("digraph fms {\n  node [shape=box];\n");
                for (id, node) in self.nodes.iter().enumerate() {
                    let _ = writeln!(s, "  n{id} [label=\"{}\"];", escape(&Self::label(node)));
                }
                for (id, node) in self.nodes.iter().enumerate() {
                    if let Some((f, t, l, r)) = node.split {
                        let (lc, rc) = self.conditions(f, t);
                        let _ = writeln!(s, "  n{id} -> n{l} [label=\"{}\"];", escape(&lc));
                        let _ = writeln!(s, "  n{id} -> n{r} [label=\"{}\"];", escape(&rc));
                    }
                }
                s.push_str("}\n");
                s
            }
        }
    }

    fn text_node(&self, id: usize, condition: Option<&str>, s: &mut String) {
        let node = &self.nodes[id];
        let indent = "  ".repeat(node.depth);
        match condition {
            Some(c) => {
                let _ = writeln!(s, "{indent}{c}: {}", Self::label(node));
            }
            None => {
                let _ = writeln!(s, "{indent}{}", Self::label(node));
            }
        }
        if let Some((f, t, l, r)) = node.split {
            let (lc, rc) = self.conditions(f, t);
            self.text_node(l, Some(&lc), s);
            self.text_node(r, Some(&rc), s);
        }
    }
}
