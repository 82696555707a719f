//! Gaussian augmentation of the training partition.
//!
//! Every label below the target count is topped up with synthetic samples.
//! A synthetic sample copies a random original of the same (variety, label)
//! subset and adds per-OTU noise drawn from `N(μ_j / d, σ_j / d)`, where μ and
//! σ are that subset's mean and population standard deviation and `d` is the
//! noise divisor. Results are clamped at zero unless `clamp_at_zero` is off
//! (for log-ratio or centred inputs, where negative values are meaningful).

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_matrix_csv, BinaryLabels, OtuTable};
use crate::error::{Error, Result};
use crate::rng::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub target_per_label: usize,
    pub noise_divisor: f64,
    pub clamp_at_zero: bool,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { target_per_label: 400, noise_divisor: 100.0, clamp_at_zero: true, seed: 0 }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_per_label < 1 {
            return Err(Error::InvalidArgument("target_per_label must be at least 1".into()));
        }
        if !(self.noise_divisor > 0.0) {
            return Err(Error::InvalidArgument("noise_divisor must be positive".into()));
        }
        Ok(())
    }
}

/// Per-OTU mean and population sd over one (variety, label) subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetStats {
    pub mean: Array1<f64>,
    pub sd: Array1<f64>,
}

impl SubsetStats {
    pub fn of(rows: &Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::EmptyTable("subset has no rows".into()));
        }
        let mean = rows.mean_axis(Axis(0)).expect("nonempty");
        let sd = rows.std_axis(Axis(0), 0.0);
        Ok(SubsetStats { mean, sd })
    }
}

/// Augmented training data. `provenance[i]` names the source sample of a
/// synthetic row and is `None` for original rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub table: OtuTable,
    pub labels: BinaryLabels,
    pub provenance: Vec<Option<String>>,
}

impl Augmented {
    pub fn n_synthetic(&self) -> usize {
        self.provenance.iter().filter(|p| p.is_some()).count()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        write_matrix_csv(
            writer,
            &self.table.sample_ids,
            &self.table.otu_names,
            &self.table.counts,
            Some(&self.provenance),
        )
    }
}

/// Splits `need` synthetic samples across subsets proportionally to their
/// sizes; leftovers go to the largest fractional parts (earlier subset wins).
fn allocate(need: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut quota: Vec<usize> = sizes.iter().map(|&s| need * s / total).collect();
    let mut rest = need - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| ((need * sizes[b]) % total).cmp(&((need * sizes[a]) % total)).then(a.cmp(&b)));
    for i in order {
        if rest == 0 {
            break;
        }
        quota[i] += 1;
        rest -= 1;
    }
    quota
}

pub fn augment_training(train: &OtuTable, labels: &BinaryLabels, spec: &AugmentSpec) -> Result<Augmented> {
    spec.validate()?;
    if labels.len() != train.n_samples() {
        return Err(Error::Shape(format!(
            "{} labels for {} training samples",
            labels.len(),
            train.n_samples()
        )));
    }
    let p = train.n_otus();
    let mut sample_ids = train.sample_ids.clone();
    let mut varieties = train.varieties.clone();
    let mut out_labels = labels.labels.clone();
    let mut provenance: Vec<Option<String>> = vec![None; train.n_samples()];
    let mut synthetic: Vec<f64> = Vec::new();
    let mut counter = 0usize;

    for label in [0u8, 1u8] {
        let have = labels.count(label);
        if have >= spec.target_per_label {
            continue;
        }
        if have == 0 {
            return Err(Error::EmptyTable(format!(
                "subset (variety=*, label={label}) is empty; cannot augment"
            )));
        }
        let need = spec.target_per_label - have;
        let mut subsets: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.labels.iter().enumerate() {
            if l == label {
                subsets.entry(train.varieties[i].as_str()).or_default().push(i);
            }
        }
        let sizes: Vec<usize> = subsets.values().map(Vec::len).collect();
        let quotas = allocate(need, &sizes);
        for (v_idx, ((variety, rows), quota)) in subsets.iter().zip(quotas).enumerate() {
            if quota == 0 {
                continue;
            }
            let block = train.counts.select(Axis(0), rows);
            let stats = SubsetStats::of(&block).map_err(|_| {
                Error::EmptyTable(format!("subset (variety={variety}, label={label}) is empty"))
            })?;
            let mut rng = derived_rng(spec.seed, &[label as u64, v_idx as u64]);
            for _ in 0..quota {
                let src = rows[rng.random_range(0..rows.len())];
                for j in 0..p {
                    let z: f64 = rng.sample(StandardNormal);
                    let noise = (stats.mean[j] + stats.sd[j] * z) / spec.noise_divisor;
                    let v = train.counts[[src, j]] + noise;
                    synthetic.push(if spec.clamp_at_zero { v.max(0.0) } else { v });
                }
                let source = &train.sample_ids[src];
                sample_ids.push(format!("{source}_aug{counter}"));
                counter += 1;
                varieties.push(variety.to_string());
                out_labels.push(label);
                provenance.push(Some(source.clone()));
            }
        }
    }

    let extra = Array2::from_shape_vec((counter, p), synthetic).expect("row-major synthetic block");
    let counts = ndarray::concatenate(Axis(0), &[train.counts.view(), extra.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let table = OtuTable::new(sample_ids, train.otu_names.clone(), counts, train.level)?
        .with_varieties(varieties)?;
    Ok(Augmented {
        table,
        labels: BinaryLabels::new(labels.response.clone(), out_labels),
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaxonomicLevel;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn train(counts: Array2<f64>, labels: Vec<u8>, varieties: Vec<&str>) -> (OtuTable, BinaryLabels) {
        let n = counts.nrows();
        let p = counts.ncols();
        let t = OtuTable::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..p).map(|j| format!("o{j}")).collect(),
            counts,
            TaxonomicLevel::Family,
        )
        .unwrap()
        .with_varieties(varieties.into_iter().map(String::from).collect())
        .unwrap();
        (t, BinaryLabels::new("Scab", labels))
    }

    fn random_train(n0: usize, n1: usize, seed: u64) -> (OtuTable, BinaryLabels) {
        let mut rng = derived_rng(seed, &[]);
        let n = n0 + n1;
        let counts = Array2::from_shape_fn((n, 6), |_| rng.random_range(0.0..20.0));
        let labels = (0..n).map(|i| u8::from(i >= n0)).collect();
        let vars = ["Agria", "Fontane", "Innovator", "Lady"];
        train(counts, labels, (0..n).map(|i| vars[i % 4]).collect())
    }

    #[test]
    fn allocation_is_proportional() {
        assert_eq!(allocate(10, &[1, 1, 2]), vec![3, 2, 5]);
        assert_eq!(allocate(7, &[5]), vec![7]);
        assert_eq!(allocate(100, &[30, 30, 40]).iter().sum::<usize>(), 100);
    }

    #[test]
    fn counts_match_target() {
        let (t, l) = random_train(300, 500, 1);
        let a = augment_training(&t, &l, &AugmentSpec::default()).unwrap();
        assert_eq!(a.labels.count(0), 400);
        assert_eq!(a.labels.count(1), 500);
        assert_eq!(a.n_synthetic(), 100);
        assert!(a.provenance.iter().skip(800).all(Option::is_some));
    }

    #[test]
    fn both_labels_below_target_balance_to_800() {
        let (t, l) = random_train(30, 170, 2);
        let a = augment_training(&t, &l, &AugmentSpec::default()).unwrap();
        assert_eq!(a.table.n_samples(), 800);
        assert_eq!((a.labels.count(0), a.labels.count(1)), (400, 400));
        // originals kept in place
        assert_eq!(a.table.counts.slice(ndarray::s![..200, ..]), t.counts);
    }

    #[test]
    fn degenerate_sd_gives_deterministic_shift() {
        let (t, l) = train(array![[0.0, 10.0], [3.0, 3.0]], vec![0, 1], vec!["A", "A"]);
        let spec = AugmentSpec { target_per_label: 2, ..AugmentSpec::default() };
        let a = augment_training(&t, &l, &spec).unwrap();
        let close = |i: usize, want: [f64; 2]| {
            a.table.counts.row(i).iter().zip(want).all(|(x, w)| (x - w).abs() < 1e-12)
        };
        assert!(close(2, [0.0, 10.1]));
        assert!(close(3, [3.03, 3.03]));
        assert_eq!(a.provenance[2].as_deref(), Some("s0"));
        assert!(a.table.sample_ids[2].starts_with("s0_aug"));
    }

    #[test]
    fn empty_label_is_an_error() {
        let (t, l) = train(array![[1.0], [2.0]], vec![1, 1], vec!["A", "B"]);
        let err = augment_training(&t, &l, &AugmentSpec::default()).unwrap_err();
        assert!(err.to_string().contains("label=0"));
    }

    #[test]
    fn noise_mean_matches_subset_mean() {
        // one subset of two rows; μ = [5, 20], σ = [1, 2]
        let (t, l) = train(array![[4.0, 18.0], [6.0, 22.0], [1.0, 1.0]], vec![0, 0, 1], vec!["A", "A", "A"]);
        let spec = AugmentSpec { target_per_label: 10_002, noise_divisor: 1.0, seed: 9, ..AugmentSpec::default() };
        let a = augment_training(&t, &l, &spec).unwrap();
        let ids: std::collections::HashMap<&str, usize> =
            t.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut diff = [Vec::new(), Vec::new()];
        for (i, prov) in a.provenance.iter().enumerate() {
            if let (Some(src), 0) = (prov, a.labels.labels[i]) {
                let s = ids[src.as_str()];
                for j in 0..2 {
                    diff[j].push(a.table.counts[[i, j]] - t.counts[[s, j]]);
                }
            }
        }
        assert_eq!(diff[0].len(), 10_000);
        for (j, (mu, sd)) in [(5.0, 1.0), (20.0, 2.0)].into_iter().enumerate() {
            let m = crate::stats::mean(&diff[j]);
            let se = sd / (diff[j].len() as f64).sqrt();
            assert!((m - mu).abs() < 3.0 * se, "otu {j}: {m}");
        }
    }

    #[test]
    fn large_divisor_converges_to_source() {
        let (t, l) = random_train(5, 10, 3);
        let spec = AugmentSpec { target_per_label: 20, noise_divisor: 1e12, ..AugmentSpec::default() };
        let a = augment_training(&t, &l, &spec).unwrap();
        for (i, prov) in a.provenance.iter().enumerate() {
            if let Some(src) = prov {
                let s = t.sample_ids.iter().position(|x| x == src).unwrap();
                for j in 0..t.n_otus() {
                    assert!((a.table.counts[[i, j]] - t.counts[[s, j]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn unclamped_output_keeps_negative_values() {
        let (t, l) = train(array![[-2.0, 1.0], [-1.0, 2.0], [-3.0, 0.5]], vec![0, 0, 1], vec!["A", "A", "A"]);
        let base = AugmentSpec { target_per_label: 50, noise_divisor: 1.0, seed: 4, ..AugmentSpec::default() };
        let free = augment_training(&t, &l, &AugmentSpec { clamp_at_zero: false, ..base }).unwrap();
        let clamped = augment_training(&t, &l, &base).unwrap();
        let syn = |a: &Augmented| a.table.counts.slice(ndarray::s![3.., 0]).to_vec();
        assert!(syn(&free).iter().all(|&v| v < 0.0));
        assert!(syn(&clamped).iter().all(|&v| v == 0.0));
        // synthetic rows differ only by the floor; originals are untouched
        assert_eq!(free.table.counts.slice(ndarray::s![..3, ..]), t.counts);
        assert_eq!(clamped.table.counts.slice(ndarray::s![..3, ..]), t.counts);
        let tail = |a: &Augmented| a.table.counts.slice(ndarray::s![3.., ..]).to_owned();
        for (f, c) in tail(&free).iter().zip(tail(&clamped).iter()) {
            assert_eq!(f.max(0.0), *c);
        }
    }

    proptest! {
        #[test]
        fn no_leakage_and_non_negative(seed in 0u64..500, n0 in 1usize..20, n1 in 1usize..20) {
            let (full, labels) = random_train(n0 + 5, n1 + 5, seed);
            let n = full.n_samples();
            let mut rng = derived_rng(seed, &[1]);
            let test: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.2)).collect();
            let train_rows: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
            let t = full.select_rows(&train_rows);
            let l = labels.select(&train_rows);
            prop_assume!(l.count(0) > 0 && l.count(1) > 0);
            let spec = AugmentSpec { target_per_label: 30, noise_divisor: 0.5, seed, ..AugmentSpec::default() };
            let a = augment_training(&t, &l, &spec).unwrap();
            prop_assert!(a.table.counts.iter().all(|&v| v >= 0.0));
            for src in a.provenance.iter().flatten() {
                prop_assert!(t.sample_ids.contains(src));
                prop_assert!(!test.iter().any(|&r| &full.sample_ids[r] == src));
            }
        }
    }
}
