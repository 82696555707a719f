//! Feature selection: seven ML criteria voting into a TOTAL score, combined
//! with degree-difference network selection into a 0–3 score.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{
    fit_decision_tree, fit_gradient_boosting, fit_logistic_regression, fit_random_forest, BoostingConfig,
    ForestConfig, TreeParams,
};
use crate::netinfer::{compare_networks, infer_network, select_by_degree_diff, NetworkComparison};
use crate::stats::{ceil_fraction, quantile_sorted, sorted};

pub const CRITERIA: [&str; 7] = ["KBest", "Mutual", "LR", "DT", "GB", "RF", "Max"];
const MI_BINS: usize = 10;

fn check(x: &Array2<f64>, y: &[u8]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::InvalidArgument("both classes must be present".into()));
    }
    Ok(())
}

/// Indices of the top `k` scores (descending), ties broken by name.
pub fn top_k_by_score(scores: &[f64], names: &[String], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then_with(|| names[a].cmp(&names[b]))
    });
    idx.truncate(k);
    idx
}

/// Two-group one-way ANOVA F statistic per column. Zero within-group
/// variance with a nonzero between-group term gives `+inf`.
pub fn anova_f_scores(x: &Array2<f64>, y: &[u8]) -> Result<Vec<f64>> {
    check(x, y)?;
    let n = y.len();
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let n0 = n - n1;
    let df_within = (n - 2).max(1) as f64;
    Ok(x
        .axis_iter(Axis(1))
        .map(|col| {
            let (mut s0, mut s1) = (0.0, 0.0);
            for (v, &l) in col.iter().zip(y) {
                if l == 0 {
                    s0 += v;
                } else {
                    s1 += v;
                }
            }
            let (m0, m1) = (s0 / n0 as f64, s1 / n1 as f64);
            let m = (s0 + s1) / n as f64;
            let between = n0 as f64 * (m0 - m).powi(2) + n1 as f64 * (m1 - m).powi(2);
            let within: f64 = col
                .iter()
                .zip(y)
                .map(|(v, &l)| (v - if l == 0 { m0 } else { m1 }).powi(2))
                .sum();
            if within <= 0.0 {
                if between > 0.0 { f64::INFINITY } else { 0.0 }
            } else {
                between / (within / df_within)
            }
        })
        .collect())
}

/// Bin index of every value. Columns with at most ten distinct values keep
/// one bin per value; otherwise ten equal-frequency bins are used.
fn discretize(col: &[f64]) -> Vec<usize> {
    let v = sorted(col);
    let mut distinct = v.clone();
    distinct.dedup();
    let edges: Vec<f64> = if distinct.len() <= MI_BINS {
        distinct[..distinct.len() - 1].to_vec()
    } else {
        let mut e: Vec<f64> = (1..MI_BINS).map(|k| quantile_sorted(&v, k as f64 / MI_BINS as f64)).collect();
        e.dedup();
        e
    };
    col.iter().map(|x| edges.partition_point(|e| e < x)).collect()
}

/// Plug-in mutual information (nats) between each discretized column and `y`.
pub fn mutual_information(x: &Array2<f64>, y: &[u8]) -> Result<Vec<f64>> {
    check(x, y)?;
    let n = y.len() as f64;
    Ok(x
        .axis_iter(Axis(1))
        .map(|col| {
            if col.is_empty() {
                return 0.0;
            }
            let bins = discretize(&col.to_vec());
            let nb = bins.iter().max().map_or(0, |m| m + 1);
            let mut joint = vec![[0.0f64; 2]; nb];
            for (&b, &l) in bins.iter().zip(y) {
                joint[b][l as usize] += 1.0;
            }
            let py = [
                joint.iter().map(|j| j[0]).sum::<f64>() / n,
                joint.iter().map(|j| j[1]).sum::<f64>() / n,
            ];
            let mut mi = 0.0;
            for j in &joint {
                let pb = (j[0] + j[1]) / n;
                for c in 0..2 {
                    let pj = j[c] / n;
                    if pj > 0.0 {
                        mi += pj * (pj / (pb * py[c])).ln();
                    }
                }
            }
            mi.max(0.0)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RfeEstimator {
    LogReg { l2: f64 },
    DecisionTree { depth: usize },
    GradBoost(BoostingConfig),
    RandomForest { n_estimators: usize },
}

impl RfeEstimator {
    fn importances(&self, x: &Array2<f64>, y: &[u8], seed: u64) -> Result<Vec<f64>> {
        Ok(match *self {
            RfeEstimator::LogReg { l2 } => {
                fit_logistic_regression(x, y, l2)?.weights.iter().map(|w| w.abs()).collect()
            }
            RfeEstimator::DecisionTree { depth } => {
                let params = TreeParams { max_depth: depth, seed, ..TreeParams::default() };
                fit_decision_tree(x, y, &params)?.importances
            }
            RfeEstimator::GradBoost(cfg) => fit_gradient_boosting(x, y, &cfg)?.importances,
            RfeEstimator::RandomForest { n_estimators } => {
                let cfg = ForestConfig { n_estimators, seed, ..ForestConfig::default() };
                fit_random_forest(x, y, &cfg)?.importances()
            }
        })
    }
}

/// Recursive feature elimination with step 1. Among equally unimportant
/// features the one with the highest index is dropped first. Returns the
/// surviving column indices in ascending order.
pub fn rfe(estimator: RfeEstimator, x: &Array2<f64>, y: &[u8], n_select: usize, seed: u64) -> Result<Vec<usize>> {
    check(x, y)?;
    let p = x.ncols();
    if n_select == 0 || n_select > p {
        return Err(Error::InvalidArgument(format!("n_select {n_select} outside 1..={p}")));
    }
    let mut alive: Vec<usize> = (0..p).collect();
    let mut iteration = 0;
    while alive.len() > n_select {
        let sub = x.select(Axis(1), &alive);
        let imp = estimator.importances(&sub, y, seed).map_err(|e| {
            Error::Numerical(format!("RFE fit failed at iteration {iteration}: {e}"))
        })?;
        let mut worst = 0;
        for (i, &v) in imp.iter().enumerate() {
            if v <= imp[worst] {
                worst = i;
            }
        }
        alive.remove(worst);
        iteration += 1;
    }
    Ok(alive)
}

/// Columns whose maximum entry ranks in the top `ceil(fraction · p)`.
pub fn max_value_rank(x: &Array2<f64>, names: &[String], fraction: f64) -> Vec<usize> {
    let maxima: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
    top_k_by_score(&maxima, names, ceil_fraction(fraction, names.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub otu: String,
    /// Selection flags in [`CRITERIA`] order.
    pub flags: [bool; 7],
    pub total: u8,
    pub ml_selected: bool,
    pub network_selected: bool,
    pub net_degree_diff: Option<usize>,
    pub combined: u8,
}

fn rank_order(a: &FeatureScore, b: &FeatureScore) -> Ordering {
    b.total.cmp(&a.total).then_with(|| a.otu.cmp(&b.otu))
}

/// TOTAL per OTU from a 7 × p flag matrix, ranked by TOTAL (descending,
/// ties by name), plus the top `ceil(fraction · p)` names.
pub fn total_score(flags: &[Vec<bool>], names: &[String], fraction: f64) -> Result<(Vec<FeatureScore>, Vec<String>)> {
    if flags.len() != 7 || flags.iter().any(|f| f.len() != names.len()) {
        return Err(Error::Shape(format!("flag matrix must be 7 x {}", names.len())));
    }
    let mut scores: Vec<FeatureScore> = names
        .iter()
        .enumerate()
        .map(|(j, n)| {
            let f: [bool; 7] = std::array::from_fn(|c| flags[c][j]);
            FeatureScore {
                otu: n.clone(),
                flags: f,
                total: f.iter().filter(|&&b| b).count() as u8,
                ml_selected: false,
                network_selected: false,
                net_degree_diff: None,
                combined: 0,
            }
        })
        .collect();
    scores.sort_by(rank_order);
    let k = ceil_fraction(fraction, names.len());
    for s in scores.iter_mut().take(k) {
        s.ml_selected = true;
    }
    let selected = scores[..k].iter().map(|s| s.otu.clone()).collect();
    Ok((scores, selected))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorSubsets {
    pub s0: Vec<String>,
    pub s1: Vec<String>,
    pub s2: Vec<String>,
    pub s3: Vec<String>,
}

impl PredictorSubsets {
    pub fn get(&self, score: u8) -> &[String] {
        match score {
            0 => &self.s0,
            1 => &self.s1,
            2 => &self.s2,
            _ => &self.s3,
        }
    }
}

/// Sets `combined = 1·ml + 2·network` on every score and derives the
/// predictor subsets. `OTU-S0` is cut to `|OTU-S3|` members by TOTAL rank.
pub fn combined_score(
    scores: &[FeatureScore],
    ml_selected: &[String],
    net_selected: &[String],
) -> (Vec<FeatureScore>, PredictorSubsets) {
    let ml: BTreeSet<&String> = ml_selected.iter().collect();
    let net: BTreeSet<&String> = net_selected.iter().collect();
    let mut out: Vec<FeatureScore> = scores.to_vec();
    out.sort_by(rank_order);
    let mut subsets = PredictorSubsets::default();
    for s in &mut out {
        s.ml_selected = ml.contains(&s.otu);
        s.network_selected = net.contains(&s.otu);
        s.combined = u8::from(s.ml_selected) + 2 * u8::from(s.network_selected);
        let bucket = match s.combined {
            0 => &mut subsets.s0,
            1 => &mut subsets.s1,
            2 => &mut subsets.s2,
            _ => &mut subsets.s3,
        };
        bucket.push(s.otu.clone());
    }
    subsets.s0.truncate(subsets.s3.len());
    (out, subsets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatselConfig {
    pub fraction: f64,
    pub net_threshold: f64,
    pub net_ridge: f64,
    pub lr_l2: f64,
    pub dt_depth: usize,
    pub gb: BoostingConfig,
    pub rf_trees: usize,
    pub seed: u64,
}

impl Default for FeatselConfig {
    fn default() -> Self {
        FeatselConfig {
            fraction: 0.3,
            net_threshold: crate::netinfer::DEFAULT_THRESHOLD,
            net_ridge: crate::netinfer::DEFAULT_RIDGE,
            lr_l2: 1.0,
            dt_depth: 5,
            gb: BoostingConfig::default(),
            rf_trees: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub scores: Vec<FeatureScore>,
    pub subsets: PredictorSubsets,
    pub network: NetworkComparison,
}

impl Selection {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = vec!["otu"];
        header.extend(CRITERIA);
        header.extend(["TOTAL", "net_degree_diff", "combined"]);
        w.write_record(&header)?;
        for s in &self.scores {
            let mut rec = vec![s.otu.clone()];
            rec.extend(s.flags.iter().map(|&f| u8::from(f).to_string()));
            rec.push(s.total.to_string());
            rec.push(s.net_degree_diff.map_or(String::new(), |d| d.to_string()));
            rec.push(s.combined.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn flag_vector(p: usize, chosen: &[usize]) -> Vec<bool> {
    let mut f = vec![false; p];
    chosen.iter().for_each(|&j| f[j] = true);
    f
}

/// Runs all seven criteria and the network comparison on one table.
pub fn select_features(x: &Array2<f64>, y: &[u8], names: &[String], cfg: &FeatselConfig) -> Result<Selection> {
    check(x, y)?;
    let p = names.len();
    if x.ncols() != p {
        return Err(Error::Shape(format!("{} columns but {p} names", x.ncols())));
    }
    let k = ceil_fraction(cfg.fraction, p).max(1);
    let estimators = [
        RfeEstimator::LogReg { l2: cfg.lr_l2 },
        RfeEstimator::DecisionTree { depth: cfg.dt_depth },
        RfeEstimator::GradBoost(cfg.gb),
        RfeEstimator::RandomForest { n_estimators: cfg.rf_trees },
    ];
    let criteria: Vec<Vec<bool>> = (0..7)
        .into_par_iter()
        .map(|c| {
            let chosen = match c {
                0 => top_k_by_score(&anova_f_scores(x, y)?, names, k),
                1 => top_k_by_score(&mutual_information(x, y)?, names, k),
                2..=5 => rfe(estimators[c - 2], x, y, k, cfg.seed)?,
                _ => max_value_rank(x, names, cfg.fraction),
            };
            Ok(flag_vector(p, &chosen))
        })
        .collect::<Result<_>>()?;
    let (scores, ml) = total_score(&criteria, names, cfg.fraction)?;

    let rows = |class: u8| -> Vec<usize> { (0..y.len()).filter(|&i| y[i] == class).collect() };
    let (n0, n1) = rayon::join(
        || infer_network(&x.select(Axis(0), &rows(0)), names, cfg.net_threshold, cfg.net_ridge),
        || infer_network(&x.select(Axis(0), &rows(1)), names, cfg.net_threshold, cfg.net_ridge),
    );
    let network = compare_networks(&n0?, &n1?)?;
    let net = select_by_degree_diff(&network, cfg.fraction)?;
    let (mut scores, subsets) = combined_score(&scores, &ml, &net);
    for s in &mut scores {
        s.net_degree_diff = network.diff_of(&s.otu);
    }
    Ok(Selection { scores, subsets, network })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("otu{j:02}")).collect()
    }

    #[test]
    fn anova_examples() {
        let y = [0, 0, 1, 1];
        let x = array![[1.0, 5.0, 0.0], [2.0, 5.0, 0.0], [3.0, 5.0, 1.0], [4.0, 5.0, 1.0]];
        let f = anova_f_scores(&x, &y).unwrap();
        assert!((f[0] - 8.0).abs() < 1e-12);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], f64::INFINITY);
    }

    #[test]
    fn mutual_information_examples() {
        let y: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
        let x = Array2::from_shape_fn((40, 2), |(i, j)| if j == 0 { 3.0 } else { y[i] as f64 });
        let mi = mutual_information(&x, &y).unwrap();
        assert_eq!(mi[0], 0.0);
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((mi[1] - h).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_of_noise_is_small() {
        let good = (0..10)
            .filter(|&s| {
                let mut rng = derived_rng(s, &[]);
                let x = Array2::from_shape_fn((1000, 1), |_| rng.random::<f64>());
                let y: Vec<u8> = (0..1000).map(|_| rng.random_range(0..2)).collect();
                mutual_information(&x, &y).unwrap()[0] < 0.05
            })
            .count();
        assert!(good >= 9);
    }

    #[test]
    fn rfe_keeps_planted_column() {
        let mut rng = derived_rng(5, &[]);
        let y: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let x = Array2::from_shape_fn((60, 3), |(i, j)| if j == 1 { y[i] as f64 } else { rng.random::<f64>() });
        for est in [
            RfeEstimator::LogReg { l2: 1.0 },
            RfeEstimator::DecisionTree { depth: 5 },
            RfeEstimator::GradBoost(BoostingConfig { rounds: 20, ..Default::default() }),
            RfeEstimator::RandomForest { n_estimators: 30 },
        ] {
            assert_eq!(rfe(est, &x, &y, 1, 0).unwrap(), vec![1], "{est:?}");
            assert_eq!(rfe(est, &x, &y, 3, 0).unwrap(), vec![0, 1, 2]);
            assert!(rfe(est, &x, &y, 0, 0).is_err());
        }
    }

    #[test]
    fn max_value_rank_examples() {
        let x = array![[9.0, 1.0, 5.0], [0.0, 0.0, 0.0]];
        let n = names(3);
        assert_eq!(max_value_rank(&x, &n, 0.33), vec![0]);
        // ceil(0.34 * 3) = 2
        assert_eq!(max_value_rank(&x, &n, 0.34), vec![0, 2]);
        let flat = Array2::<f64>::ones((2, 10));
        assert_eq!(max_value_rank(&flat, &names(10), 0.3), vec![0, 1, 2]);
    }

    /// The first rows of the published selection table: two OTUs chosen by
    /// all seven criteria, one by five.
    #[test]
    fn total_score_reproduces_table_order() {
        let n: Vec<String> = ["Myxococcota", "Patescibacteria", "Firmicutes", "Zeta", "Alpha"]
            .map(String::from)
            .to_vec();
        let cols = [
            [true, true, false, true, true, true, false],
            [true; 7],
            [true; 7],
            [false; 7],
            [true, false, false, false, false, false, false],
        ];
        let flags: Vec<Vec<bool>> = (0..7).map(|c| cols.iter().map(|o| o[c]).collect()).collect();
        let (scores, ml) = total_score(&flags, &n, 0.3).unwrap();
        let order: Vec<(&str, u8)> = scores.iter().map(|s| (s.otu.as_str(), s.total)).collect();
        assert_eq!(
            order,
            vec![("Firmicutes", 7), ("Patescibacteria", 7), ("Myxococcota", 5), ("Alpha", 1), ("Zeta", 0)]
        );
        assert_eq!(ml, vec!["Firmicutes", "Patescibacteria"]);
    }

    #[test]
    fn combined_scores_and_subsets() {
        let n = names(8);
        let flags: Vec<Vec<bool>> = (0..7).map(|c| (0..8).map(|j| j < 7 - c).collect()).collect();
        let (scores, _) = total_score(&flags, &n, 0.3).unwrap();
        let ml = vec![n[0].clone(), n[1].clone(), n[2].clone()];
        let net = vec![n[1].clone(), n[2].clone(), n[5].clone()];
        let (out, subsets) = combined_score(&scores, &ml, &net);
        let get = |o: &str| out.iter().find(|s| s.otu == o).unwrap().combined;
        assert_eq!((get("otu00"), get("otu01"), get("otu05"), get("otu07")), (1, 3, 2, 0));
        assert_eq!(subsets.s3, vec!["otu01", "otu02"]);
        // highest-TOTAL score-0 OTUs, cut to |S3|
        assert_eq!(subsets.s0, vec!["otu03", "otu04"]);
        assert_eq!(subsets.s1, vec!["otu00"]);
        assert_eq!(subsets.s2, vec!["otu05"]);
    }

    #[test]
    fn end_to_end_selection_writes_table() {
        let mut rng = derived_rng(8, &[]);
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let x = Array2::from_shape_fn((40, 10), |(i, j)| rng.random::<f64>() + if j == 0 { y[i] as f64 } else { 0.0 });
        let cfg = FeatselConfig { rf_trees: 10, gb: BoostingConfig { rounds: 10, ..Default::default() }, ..Default::default() };
        let sel = select_features(&x, &y, &names(10), &cfg).unwrap();
        assert_eq!(sel.scores[0].otu, "otu00");
        assert_eq!(sel.scores[0].total, 7);
        let mut buf = Vec::new();
        sel.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("otu,KBest,Mutual,LR,DT,GB,RF,Max,TOTAL,net_degree_diff,combined\n"));
        assert_eq!(text.lines().count(), 11);
    }

    proptest! {
        #[test]
        fn total_is_permutation_equivariant(bits in proptest::collection::vec(any::<bool>(), 7 * 6), seed in 0u64..100) {
            let n = names(6);
            let flags: Vec<Vec<bool>> = bits.chunks(6).map(|c| c.to_vec()).collect();
            let mut order: Vec<usize> = (0..7).collect();
            let mut rng = derived_rng(seed, &[]);
            for i in (1..7).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<Vec<bool>> = order.iter().map(|&c| flags[c].clone()).collect();
            let (a, ma) = total_score(&flags, &n, 0.3).unwrap();
            let (b, mb) = total_score(&permuted, &n, 0.3).unwrap();
            prop_assert_eq!(ma, mb);
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.total, y.total);
                prop_assert_eq!(&x.otu, &y.otu);
            }
        }

        #[test]
        fn kbest_equals_top_anova(seed in 0u64..200) {
            let mut rng = derived_rng(seed, &[]);
            let y: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
            let x = Array2::from_shape_fn((20, 7), |_| rng.random::<f64>());
            let n = names(7);
            let f = anova_f_scores(&x, &y).unwrap();
            let k = ceil_fraction(0.3, 7);
            let chosen: BTreeSet<usize> = top_k_by_score(&f, &n, k).into_iter().collect();
            let mut by_f: Vec<usize> = (0..7).collect();
            by_f.sort_by(|&a, &b| f[b].total_cmp(&f[a]));
            prop_assert_eq!(chosen, by_f[..k].iter().copied().collect::<BTreeSet<_>>());
        }
    }
}
