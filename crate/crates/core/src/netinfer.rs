//! Per-class association networks and degree-difference comparison.
//!
//! Estimation is rank based: Kendall's τ-b is mapped to a latent Gaussian
//! correlation through `sin(π τ / 2)`, projected to the nearest positive
//! definite correlation matrix, ridge regularized and inverted. Partial
//! correlations above a magnitude threshold become edges.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::ceil_fraction;

pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_RIDGE: f64 = 0.1;
const MIN_EIGENVALUE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationNetwork {
    pub nodes: Vec<String>,
    /// Symmetric partial-correlation estimate with unit diagonal.
    pub rho: Array2<f64>,
    pub threshold: f64,
}

impl AssociationNetwork {
    /// Builds a network from a given partial-correlation matrix.
    pub fn from_partial_correlations(nodes: Vec<String>, rho: Array2<f64>, threshold: f64) -> Result<Self> {
        let p = nodes.len();
        if rho.dim() != (p, p) {
            return Err(Error::Shape(format!("{p} nodes but {:?} matrix", rho.dim())));
        }
        for i in 0..p {
            for j in 0..p {
                if (rho[[i, j]] - rho[[j, i]]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument("partial correlations must be symmetric".into()));
                }
            }
        }
        Ok(AssociationNetwork { nodes, rho, threshold })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.rho[[i, j]].abs() >= self.threshold
    }

    /// Edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let p = self.len();
        (0..p)
            .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| (0..self.len()).filter(|&j| self.has_edge(i, j)).count())
            .collect()
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        1.0 - signed_distance(self.rho[[i, j]]) / 2.0
    }

    /// Graphviz rendering; positive associations green, negative red.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("graph network {\n");
        for n in &self.nodes {
            let _ = writeln!(s, "  \"{}\";", escape(n));
        }
        for (i, j) in self.edges() {
            let color = if self.rho[[i, j]] > 0.0 { "green" } else { "red" };
            let _ = writeln!(
                s,
                "  \"{}\" -- \"{}\" [color={color}, weight={:.4}];",
                escape(&self.nodes[i]),
                escape(&self.nodes[j]),
                self.similarity(i, j)
            );
        }
        s.push_str("}\n");
        s
    }
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// `sqrt(2 (1 - ρ))`: 0 for ρ = 1, 2 for ρ = -1.
pub fn signed_distance(rho: f64) -> f64 {
    (2.0 * (1.0 - rho)).max(0.0).sqrt()
}

/// Kendall's τ-b, which corrects for ties in either variable.
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut concordant, mut discordant, mut tie_a, mut tie_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].partial_cmp(&a[j]).map_or(0, |o| o as i64);
            let db = b[i].partial_cmp(&b[j]).map_or(0, |o| o as i64);
            match (da, db) {
                (0, 0) => {}
                (0, _) => tie_a += 1,
                (_, 0) => tie_b += 1,
                _ if da == db => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant + tie_a) as f64;
    let n1 = (concordant + discordant + tie_b) as f64;
    if n0 == 0.0 || n1 == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / (n0 * n1).sqrt()
}

/// Eigenvalue clipping followed by rescaling to a unit diagonal.
pub fn nearest_pd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let clipped = eig.eigenvalues.map(|l| l.max(MIN_EIGENVALUE));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d = rebuilt.diagonal().map(|v| 1.0 / v.sqrt());
    let mut out = DMatrix::from_diagonal(&d) * rebuilt * DMatrix::from_diagonal(&d);
    // exact symmetry
    let p = out.nrows();
    for i in 0..p {
        out[(i, i)] = 1.0;
        for j in i + 1..p {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Estimates the association network of the columns of `x` (n × p).
///
/// Constant columns are kept as isolated nodes so that networks inferred on
/// different classes share a node set.
pub fn infer_network(x: &Array2<f64>, names: &[String], threshold: f64, ridge: f64) -> Result<AssociationNetwork> {
    let (n, p) = x.dim();
    if names.len() != p {
        return Err(Error::Shape(format!("{p} columns but {} names", names.len())));
    }
    if n < 4 {
        return Err(Error::InvalidArgument(format!("insufficient samples: {n} < 4")));
    }
    if p < 2 {
        return Err(Error::InvalidArgument("network needs at least two columns".into()));
    }
    if !(ridge >= 0.0) || !(threshold >= 0.0) {
        return Err(Error::InvalidArgument("threshold and ridge must be non-negative".into()));
    }
    let cols: Vec<Vec<f64>> = (0..p).map(|j| x.column(j).to_vec()).collect();
    let constant: Vec<bool> = cols.iter().map(|c| c.iter().all(|&v| v == c[0])).collect();
    for (j, _) in constant.iter().enumerate().filter(|(_, &c)| c) {
        warn!("column '{}' is constant; kept as an isolated node", names[j]);
    }
    let mut latent = DMatrix::<f64>::identity(p, p);
    for i in 0..p {
        for j in i + 1..p {
            if constant[i] || constant[j] {
                continue;
            }
            let r = (PI * kendall_tau_b(&cols[i], &cols[j]) / 2.0).sin();
            latent[(i, j)] = r;
            latent[(j, i)] = r;
        }
    }
    let mut sigma = nearest_pd(&latent);
    for i in 0..p {
        sigma[(i, i)] += ridge;
    }
    let omega = sigma
        .cholesky()
        .ok_or_else(|| Error::Numerical("correlation matrix singular after ridge".into()))?
        .inverse();
    let mut rho = Array2::<f64>::eye(p);
    for i in 0..p {
        for j in i + 1..p {
            let r = (-omega[(i, j)] / (omega[(i, i)] * omega[(j, j)]).sqrt()).clamp(-1.0, 1.0);
            rho[[i, j]] = r;
            rho[[j, i]] = r;
        }
    }
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite partial correlation".into()));
    }
    Ok(AssociationNetwork { nodes: names.to_vec(), rho, threshold })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeEntry {
    pub node: String,
    pub degree0: usize,
    pub degree1: usize,
    pub diff: usize,
}

/// Nodes sorted by descending degree difference, ties by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkComparison {
    pub entries: Vec<DegreeEntry>,
}

impl NetworkComparison {
    pub fn diff_of(&self, node: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.node == node).map(|e| e.diff)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["otu", "degree0", "degree1", "degree_diff"])?;
        for e in &self.entries {
            w.write_record([e.node.clone(), e.degree0.to_string(), e.degree1.to_string(), e.diff.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn compare_networks(net0: &AssociationNetwork, net1: &AssociationNetwork) -> Result<NetworkComparison> {
    let s0: BTreeSet<&String> = net0.nodes.iter().collect();
    let s1: BTreeSet<&String> = net1.nodes.iter().collect();
    if s0 != s1 || net0.len() != net1.len() {
        return Err(Error::InvalidArgument("networks have different node sets".into()));
    }
    let d0 = net0.degrees();
    let d1 = net1.degrees();
    let pos1: std::collections::HashMap<&String, usize> =
        net1.nodes.iter().enumerate().map(|(i, n)| (n, i)).collect();
    let mut entries: Vec<DegreeEntry> = net0
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let (a, b) = (d0[i], d1[pos1[n]]);
            DegreeEntry { node: n.clone(), degree0: a, degree1: b, diff: a.abs_diff(b) }
        })
        .collect();
    entries.sort_by(|a, b| b.diff.cmp(&a.diff).then_with(|| a.node.cmp(&b.node)));
    Ok(NetworkComparison { entries })
}

/// Top `ceil(fraction · p)` nodes of the comparison ranking.
pub fn select_by_degree_diff(cmp: &NetworkComparison, fraction: f64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0,1]")));
    }
    let k = ceil_fraction(fraction, cmp.entries.len());
    Ok(cmp.entries.iter().take(k).map(|e| e.node.clone()).collect())
}
