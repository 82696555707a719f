//! Train/test splitting, weighted F1, randomized baselines and the
//! exceedance test.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryLabels, OtuTable};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_fraction: f64,
    pub folds: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan { test_fraction: 0.2, folds: 10, stratified: true, seed: 0 }
    }
}

/// Sorted train and test indices plus the CV fold of every train index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub folds: Vec<usize>,
}

/// Largest-remainder apportionment of `total` over `sizes`.
fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let mut out: Vec<usize> = sizes.iter().map(|&s| total * s / sum).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| ((total * sizes[b]) % sum).cmp(&((total * sizes[a]) % sum)).then(a.cmp(&b)));
    let mut rest = total - out.iter().sum::<usize>();
    for i in order {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

fn class_groups(labels: &[u8]) -> BTreeMap<u8, Vec<usize>> {
    let mut g: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(i);
    }
    g
}

/// Fold index of every position. Each class is shuffled and dealt round robin,
/// continuing where the previous class stopped so fold sizes stay balanced.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::InvalidArgument(format!("{} samples cannot fill {k} folds", labels.len())));
    }
    let mut assignment = vec![0; labels.len()];
    let mut offset = 0;
    for (class, mut idx) in class_groups(labels) {
        if idx.len() < k {
            warn!("class {class} has {} samples for {k} folds; some folds will lack it", idx.len());
        }
        idx.shuffle(&mut derived_rng(seed, &[0xF01D, class as u64]));
        for (j, i) in idx.into_iter().enumerate() {
            assignment[i] = (offset + j) % k;
        }
        offset += labels.iter().filter(|&&l| l == class).count();
    }
    Ok(assignment)
}

/// Stratified (or plain) test split followed by CV folds over the training part.
pub fn split(n: usize, labels: &[u8], plan: &SplitPlan) -> Result<Split> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if !(plan.test_fraction > 0.0 && plan.test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {} outside (0,1)", plan.test_fraction)));
    }
    if n < plan.folds + 1 {
        return Err(Error::InvalidArgument(format!("{n} samples too few for {} folds", plan.folds)));
    }
    let n_test = ((plan.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let groups: Vec<Vec<usize>> = if plan.stratified {
        class_groups(labels).into_values().collect()
    } else {
        vec![(0..n).collect()]
    };
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let quotas = apportion(n_test, &sizes);
    let mut test = Vec::with_capacity(n_test);
    for (g, (mut idx, q)) in groups.into_iter().zip(quotas).enumerate() {
        idx.shuffle(&mut derived_rng(plan.seed, &[0x7E57, g as u64]));
        test.extend_from_slice(&idx[..q]);
    }
    test.sort_unstable();
    let mut is_test = vec![false; n];
    test.iter().for_each(|&i| is_test[i] = true);
    let train: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    let train_labels: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
    let folds = if plan.stratified {
        stratified_folds(&train_labels, plan.folds, plan.seed)?
    } else {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derived_rng(plan.seed, &[0xF01D]));
        let mut f = vec![0; train.len()];
        for (j, i) in order.into_iter().enumerate() {
            f[i] = j % plan.folds;
        }
        f
    };
    Ok(Split { train, test, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub support: [usize; 2],
    pub weighted_f1: f64,
}

/// Per-class precision, recall and F1 (0 when undefined) and their
/// support-weighted F1 average.
pub fn weighted_f1(y_true: &[u8], y_pred: &[u8]) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!("{} true vs {} predicted labels", y_true.len(), y_pred.len())));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyTable("no labels to score".into()));
    }
    let mut cm = [[0usize; 2]; 2];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t > 1 || p > 1 {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        cm[t as usize][p as usize] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut m = Metrics { precision: [0.0; 2], recall: [0.0; 2], f1: [0.0; 2], support: [0; 2], weighted_f1: 0.0 };
    let n = y_true.len() as f64;
    for c in 0..2 {
        let tp = cm[c][c];
        let support = cm[c][0] + cm[c][1];
        let predicted = cm[0][c] + cm[1][c];
        m.precision[c] = ratio(tp, predicted);
        m.recall[c] = ratio(tp, support);
        // harmonic mean of precision and recall, written in counts
        m.f1[c] = ratio(2 * tp, support + predicted);
        m.support[c] = support;
        m.weighted_f1 += support as f64 / n * m.f1[c];
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineStrategy {
    RandomMatrix,
    SparsityPreservingRandom,
    PermutedLabels,
    PermutedRows,
}

impl BaselineStrategy {
    pub const ALL: [BaselineStrategy; 4] = [
        BaselineStrategy::RandomMatrix,
        BaselineStrategy::SparsityPreservingRandom,
        BaselineStrategy::PermutedLabels,
        BaselineStrategy::PermutedRows,
    ];

    /// Strategies are numbered 1 to 4.
    pub fn from_number(k: usize) -> Result<Self> {
        Self::ALL
            .get(k.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("baseline strategy {k} outside 1..=4")))
    }
}

fn close_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
}

pub fn generate_baseline(
    strategy: BaselineStrategy,
    table: &OtuTable,
    labels: &BinaryLabels,
    seed: u64,
) -> Result<(OtuTable, BinaryLabels)> {
    if table.n_samples() == 0 || table.n_otus() == 0 {
        return Err(Error::EmptyTable("baseline needs a nonempty table".into()));
    }
    let mut rng = derived_rng(seed, &[0xBA5E]);
    let mut out = table.clone();
    let mut out_labels = labels.clone();
    match strategy {
        BaselineStrategy::RandomMatrix => {
            out.counts.mapv_inplace(|_| rng.random::<f64>());
            close_rows(&mut out.counts);
        }
        BaselineStrategy::SparsityPreservingRandom => {
            out.counts.mapv_inplace(|v| if v != 0.0 { rng.random::<f64>() } else { 0.0 });
            close_rows(&mut out.counts);
        }
        BaselineStrategy::PermutedLabels => out_labels.labels.shuffle(&mut rng),
        BaselineStrategy::PermutedRows => {
            let mut order: Vec<usize> = (0..table.n_samples()).collect();
            order.shuffle(&mut rng);
            out.counts = table.counts.select(Axis(0), &order);
        }
    }
    Ok((out, out_labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTestResult {
    pub strategy: BaselineStrategy,
    pub f_original: f64,
    /// Weighted F1 of every successful replicate.
    pub f_list: Vec<f64>,
    pub per_class: Vec<[f64; 2]>,
    pub failed: usize,
    pub exceed: usize,
    pub ev: f64,
    pub alpha: f64,
    pub reject: bool,
}

#[derive(Serialize)]
struct BaselineSummary {
    strategy: BaselineStrategy,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "F_original")]
    f_original: f64,
    #[serde(rename = "EV")]
    ev: f64,
    reject: bool,
}

impl BaselineTestResult {
    pub fn n(&self) -> usize {
        self.f_list.len()
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&BaselineSummary {
            strategy: self.strategy,
            n: self.n(),
            f_original: self.f_original,
            ev: self.ev,
            reject: self.reject,
        })?)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "f1_class0", "f1_class1", "weighted_f1"])?;
        for (i, (f, pc)) in self.f_list.iter().zip(&self.per_class).enumerate() {
            w.write_record([i.to_string(), pc[0].to_string(), pc[1].to_string(), f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `EV = X / N` where `X` counts replicates scoring strictly above `f_original`.
pub fn exceedance(f_original: f64, f_list: &[f64]) -> (usize, f64) {
    let x = f_list.iter().filter(|&&f| f > f_original).count();
    (x, x as f64 / f_list.len() as f64)
}

/// Runs `runner` on `n` seeded baselines. Failing replicates are excluded
/// and reduce the effective `N`.
#[allow(clippy::too_many_arguments)]
pub fn exceedance_test<F>(
    f_original: f64,
    strategy: BaselineStrategy,
    table: &OtuTable,
    labels: &BinaryLabels,
    runner: F,
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<BaselineTestResult>
where
    F: Fn(&OtuTable, &BinaryLabels, u64) -> Result<Metrics> + Sync,
{
    if n < 1 {
        return Err(Error::InvalidArgument("exceedance test needs N >= 1".into()));
    }
    let outcomes: Vec<Result<Metrics>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, &[r as u64]);
            let (t, l) = generate_baseline(strategy, table, labels, s)?;
            runner(&t, &l, s)
        })
        .collect();
    let mut f_list = Vec::with_capacity(n);
    let mut per_class = Vec::with_capacity(n);
    let mut failed = 0;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(m) => {
                f_list.push(m.weighted_f1);
                per_class.push(m.f1);
            }
            Err(e) => {
                warn!("baseline replicate {r} failed: {e}");
                failed += 1;
            }
        }
    }
    if f_list.is_empty() {
        return Err(Error::Numerical("every baseline replicate failed".into()));
    }
    let (exceed, ev) = exceedance(f_original, &f_list);
    Ok(BaselineTestResult {
        strategy,
        f_original,
        f_list,
        per_class,
        failed,
        exceed,
        ev,
        alpha,
        reject: ev < alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaxonomicLevel;
    use proptest::prelude::*;
    use rand::Rng;

    /// Confusion-matrix oracle written out longhand.
    fn oracle(t: &[u8], p: &[u8]) -> f64 {
        let n = t.len() as f64;
        let mut total = 0.0;
        for c in [0u8, 1] {
            let tp = t.iter().zip(p).filter(|(a, b)| **a == c && **b == c).count() as f64;
            let fp = t.iter().zip(p).filter(|(a, b)| **a != c && **b == c).count() as f64;
            let fn_ = t.iter().zip(p).filter(|(a, b)| **a == c && **b != c).count() as f64;
            let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            total += (tp + fn_) / n * f1;
        }
        total
    }

    #[test]
    fn worked_examples() {
        let m = weighted_f1(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert!((m.f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1[1] - 0.8).abs() < 1e-15);
        assert!((m.weighted_f1 - 11.0 / 15.0).abs() < 1e-15);
        let t: Vec<u8> = (0..100).map(|i| u8::from(i >= 90)).collect();
        let m = weighted_f1(&t, &[0; 100]).unwrap();
        assert!((m.weighted_f1 - 0.9 * (1.8 / 1.9)).abs() < 1e-12);
        assert_eq!(weighted_f1(&[1, 0], &[1, 0]).unwrap().weighted_f1, 1.0);
        assert!(weighted_f1(&[], &[]).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let labels: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let plan = SplitPlan { folds: 4, ..Default::default() };
        let s = split(10, &labels, &plan).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        assert_eq!(s.test.iter().map(|&i| labels[i]).sum::<u8>(), 1);
        assert_eq!(s, split(10, &labels, &plan).unwrap());
        assert!(s.folds.iter().all(|&f| f < 4));
    }

    #[test]
    fn stratified_folds_spread_minority() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 6)).collect();
        let f = stratified_folds(&labels, 5, 1).unwrap();
        let mut with_pos = [false; 5];
        for (i, &l) in labels.iter().enumerate() {
            if l == 1 {
                with_pos[f[i]] = true;
            }
        }
        assert!(with_pos.iter().all(|&b| b));
        let sizes: Vec<usize> = (0..5).map(|k| f.iter().filter(|&&x| x == k).count()).collect();
        assert_eq!(sizes, vec![20; 5]);
    }

    fn small_table(n: usize, p: usize, seed: u64) -> OtuTable {
        let mut rng = derived_rng(seed, &[]);
        let counts = Array2::from_shape_fn((n, p), |_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(1..30) as f64 });
        OtuTable::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..p).map(|j| format!("o{j}")).collect(),
            counts,
            TaxonomicLevel::Genus,
        )
        .unwrap()
    }

    #[test]
    fn baseline_strategies() {
        let t = small_table(12, 6, 0);
        let l = BinaryLabels::new("Scab", (0..12).map(|i| (i % 3 == 0) as u8).collect());
        let (a, _) = generate_baseline(BaselineStrategy::RandomMatrix, &t, &l, 1).unwrap();
        assert!(a.depths().iter().all(|s| (s - 1.0).abs() < 1e-12));
        let (b, _) = generate_baseline(BaselineStrategy::SparsityPreservingRandom, &t, &l, 1).unwrap();
        for (x, y) in b.counts.iter().zip(t.counts.iter()) {
            assert_eq!(*x == 0.0, *y == 0.0);
        }
        let (c, lc) = generate_baseline(BaselineStrategy::PermutedLabels, &t, &l, 1).unwrap();
        assert_eq!(c, t);
        assert_eq!(lc.count(1), l.count(1));
        let (d, ld) = generate_baseline(BaselineStrategy::PermutedRows, &t, &l, 1).unwrap();
        assert_eq!(ld, l);
        assert_eq!(d.counts.sum(), t.counts.sum());
    }

    #[test]
    fn exceedance_endpoints() {
        let t = small_table(10, 3, 1);
        let l = BinaryLabels::new("Scab", vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let constant = |v: f64| {
            move |_: &OtuTable, _: &BinaryLabels, _: u64| {
                Ok(Metrics { precision: [v; 2], recall: [v; 2], f1: [v; 2], support: [5, 5], weighted_f1: v })
            }
        };
        let r = exceedance_test(1.0, BaselineStrategy::PermutedLabels, &t, &l, constant(0.7), 20, 0.05, 0).unwrap();
        assert_eq!((r.exceed, r.ev, r.reject), (0, 0.0, true));
        let r = exceedance_test(0.1, BaselineStrategy::PermutedLabels, &t, &l, constant(0.7), 20, 0.05, 0).unwrap();
        assert_eq!((r.ev, r.reject), (1.0, false));
        // ties do not count
        let r = exceedance_test(0.7, BaselineStrategy::PermutedLabels, &t, &l, constant(0.7), 5, 0.05, 0).unwrap();
        assert_eq!(r.exceed, 0);
    }

    #[test]
    fn failing_replicates_are_excluded() {
        let t = small_table(10, 3, 1);
        let l = BinaryLabels::new("Scab", vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let runner = |_: &OtuTable, _: &BinaryLabels, s: u64| {
            if s % 2 == 0 {
                Err(Error::Numerical("boom".into()))
            } else {
                weighted_f1(&[0, 1], &[0, 1])
            }
        };
        let r = exceedance_test(0.5, BaselineStrategy::PermutedLabels, &t, &l, runner, 40, 0.05, 3).unwrap();
        assert_eq!(r.failed + r.n(), 40);
        assert!(r.failed > 0 && r.n() > 0);
        let json = r.summary_json().unwrap();
        assert!(json.contains("\"EV\":1.0") && json.contains("\"N\":"));
    }

    /// Null model: the "real" labels are themselves random, so EV should be
    /// spread over (0, 1).
    #[test]
    fn null_exceedance_is_spread() {
        let mut inside = 0;
        for seed in 0..20 {
            let t = small_table(60, 4, 100 + seed);
            let mut rng = derived_rng(seed, &[9]);
            let l = BinaryLabels::new("Scab", (0..60).map(|_| rng.random_range(0..2)).collect());
            // training-free rule: predict 1 when column 0 exceeds its median
            let runner = |tab: &OtuTable, lab: &BinaryLabels, _: u64| {
                let col = tab.counts.column(0).to_vec();
                let med = crate::stats::median(&col);
                let pred: Vec<u8> = col.iter().map(|&v| u8::from(v > med)).collect();
                weighted_f1(&lab.labels, &pred)
            };
            let f0 = runner(&t, &l, 0).unwrap().weighted_f1;
            let r = exceedance_test(f0, BaselineStrategy::PermutedLabels, &t, &l, runner, 200, 0.05, seed).unwrap();
            if r.ev > 0.05 && r.ev < 0.95 {
                inside += 1;
            }
        }
        assert!(inside >= 18, "{inside}/20");
    }

    proptest! {
        #[test]
        fn matches_confusion_oracle(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..20)) {
            let (t, p): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let m = weighted_f1(&t, &p).unwrap();
            prop_assert_eq!(m.weighted_f1, oracle(&t, &p));
            let flip = |v: &[u8]| v.iter().map(|x| 1 - x).collect::<Vec<u8>>();
            let swapped = weighted_f1(&flip(&t), &flip(&p)).unwrap();
            prop_assert!((m.weighted_f1 - swapped.weighted_f1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&m.weighted_f1));
        }

        #[test]
        fn split_partitions(n in 12usize..60, seed in 0u64..100) {
            let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
            let s = split(n, &labels, &SplitPlan { seed, ..Default::default() }).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.folds.len(), s.train.len());
        }
    }
}
