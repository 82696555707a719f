//! Synthetic datasets with a planted label signal, used for desk-scale
//! validation of the whole pipeline.
//!
//! Genus-level counts are negative binomial (gamma-Poisson) with per-OTU
//! means and per-sample depth factors. Coarser levels sum consecutive genera:
//! two per family, four per order, eight per class and sixteen per phylum.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::data::{BinaryLabels, EnvGroup, EnvTable, OtuTable, Response, ResponseSet, SampleMetadata, TaxonomicLevel};
use crate::error::{Error, Result};
use crate::rng::derived_rng;

pub const VARIETIES: [&str; 4] = ["variety_1", "variety_2", "variety_3", "variety_4"];
pub const SOIL_FEATURES: [&str; 12] = ["pH", "OM", "P", "K", "Ca", "Mg", "Zn", "Fe", "Mn", "Cu", "B", "CEC"];
pub const DS_FEATURES: [&str; 4] = ["bacteria", "fungi", "actinomycetes", "pseudomonads"];
pub const ALPHA_FEATURES: [&str; 9] = [
    "observed", "chao1", "shannon", "simpson", "inv_simpson", "pielou", "berger_parker", "margalef", "menhinick",
];

/// Negative binomial size parameter of the generated counts.
const DISPERSION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub p: usize,
    pub n_signal: usize,
    pub effect: f64,
    /// Probability of label 1.
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n: 200, p: 40, n_signal: 5, effect: 5.0, imbalance: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// Tables in Phylum..Genus order.
    pub levels: Vec<OtuTable>,
    pub labels: BinaryLabels,
    pub metadata: SampleMetadata,
    pub soil: EnvTable,
    pub ds: EnvTable,
    /// Genus names that carry the planted signal.
    pub signal: Vec<String>,
}

impl SynthData {
    pub fn level(&self, level: TaxonomicLevel) -> &OtuTable {
        &self.levels[level.index()]
    }
}

fn check(spec: &SynthSpec) -> Result<()> {
    if spec.n < 2 || spec.p == 0 {
        return Err(Error::InvalidArgument("need n >= 2 and p >= 1".into()));
    }
    if spec.n_signal > spec.p {
        return Err(Error::InvalidArgument(format!("n_signal {} exceeds p {}", spec.n_signal, spec.p)));
    }
    if !(spec.effect >= 0.0) {
        return Err(Error::InvalidArgument("effect must be non-negative".into()));
    }
    if !(spec.imbalance > 0.0 && spec.imbalance < 1.0) {
        return Err(Error::InvalidArgument("imbalance must lie in (0,1)".into()));
    }
    Ok(())
}

/// Genus-level counts, labels (stored as the `Scabpit` response) and
/// metadata with varieties assigned round robin.
pub fn synth_generate(
    n: usize,
    p: usize,
    n_signal: usize,
    effect: f64,
    imbalance: f64,
    seed: u64,
) -> Result<(OtuTable, BinaryLabels, SampleMetadata)> {
    let spec = SynthSpec { n, p, n_signal, effect, imbalance, seed };
    let (genus, labels, metadata, _) = generate_genus(&spec)?;
    Ok((genus, labels, metadata))
}

/// Evenly spaced signal columns so they spread across coarser taxa.
fn signal_columns(p: usize, n_signal: usize) -> Vec<usize> {
    (0..n_signal).map(|k| k * p / n_signal).collect()
}

fn generate_genus(spec: &SynthSpec) -> Result<(OtuTable, BinaryLabels, SampleMetadata, Vec<String>)> {
    check(spec)?;
    let SynthSpec { n, p, .. } = *spec;
    let mut label_rng = derived_rng(spec.seed, &[1]);
    let labels: Vec<u8> = (0..n).map(|_| u8::from(label_rng.random_bool(spec.imbalance))).collect();
    let mut rng = derived_rng(spec.seed, &[2]);
    let means: Vec<f64> = (0..p).map(|_| rng.random_range(0.5f64..5.0).exp()).collect();
    let depth: Vec<f64> = (0..n).map(|_| (0.3 * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
    let signal = signal_columns(p, spec.n_signal);
    let mut is_signal = vec![false; p];
    signal.iter().for_each(|&j| is_signal[j] = true);
    let mut counts = Array2::<f64>::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            let shift = if is_signal[j] && labels[i] == 1 { 1.0 + spec.effect } else { 1.0 };
            let mu = means[j] * depth[i] * shift;
            let lambda = Gamma::new(DISPERSION, mu / DISPERSION).expect("positive mean").sample(&mut rng);
            counts[[i, j]] = if lambda > 0.0 {
                Poisson::new(lambda).expect("positive rate").sample(&mut rng)
            } else {
                0.0
            };
        }
    }
    let ids: Vec<String> = (0..n).map(|i| format!("S{:04}", i + 1)).collect();
    let names: Vec<String> = (0..p).map(|j| format!("Genus_{j:03}")).collect();
    let varieties: Vec<String> = (0..n).map(|i| VARIETIES[i % VARIETIES.len()].to_string()).collect();
    let genus = OtuTable::new(ids.clone(), names.clone(), counts, TaxonomicLevel::Genus)?.with_varieties(varieties.clone())?;

    let mut resp_rng = derived_rng(spec.seed, &[3]);
    let mut values = std::collections::BTreeMap::new();
    for r in Response::ALL {
        let v: Vec<f64> = match r {
            Response::Scabpit => labels.iter().map(|&l| f64::from(l)).collect(),
            Response::YieldMeter | Response::YieldPlant => {
                (0..n).map(|_| (1.0 + 0.2 * resp_rng.sample::<f64, _>(StandardNormal)).exp()).collect()
            }
            Response::Scab => (0..n).map(|_| f64::from(u8::from(resp_rng.random_bool(0.8)))).collect(),
            Response::Scabsuper => (0..n).map(|_| f64::from(u8::from(resp_rng.random_bool(0.5)))).collect(),
            Response::BlackScurf => (0..n).map(|_| f64::from(u8::from(resp_rng.random_bool(0.05)))).collect(),
        };
        values.insert(r, v);
    }
    let metadata = SampleMetadata {
        sample_ids: ids,
        varieties,
        states: vec!["synthetic".to_string(); n],
        responses: ResponseSet { values },
    };
    let signal_names = signal.iter().map(|&j| names[j].clone()).collect();
    Ok((genus, BinaryLabels::new(Response::Scabpit.name(), labels), metadata, signal_names))
}

/// Sums groups of `width` consecutive columns.
fn aggregate(genus: &OtuTable, width: usize, level: TaxonomicLevel) -> Result<OtuTable> {
    let p = genus.n_otus();
    let groups = p.div_ceil(width);
    let mut counts = Array2::<f64>::zeros((genus.n_samples(), groups));
    for j in 0..p {
        let mut col = counts.column_mut(j / width);
        col += &genus.counts.column(j);
    }
    let names = (0..groups).map(|g| format!("{}_{g:03}", level.name())).collect();
    OtuTable::new(genus.sample_ids.clone(), names, counts, level)?.with_varieties(genus.varieties.clone())
}

/// Tables for all five levels, Phylum first.
pub fn aggregate_levels(genus: &OtuTable) -> Result<Vec<OtuTable>> {
    let widths = [16, 8, 4, 2];
    let mut out = Vec::with_capacity(5);
    for (level, w) in TaxonomicLevel::ALL.iter().zip(widths) {
        out.push(aggregate(genus, w, *level)?);
    }
    out.push(genus.clone());
    Ok(out)
}

fn lognormal_table(ids: &[String], names: &[&str], group: EnvGroup, seed: u64) -> Result<EnvTable> {
    let mut rng = derived_rng(seed, &[group as u64 + 10]);
    let q = names.len();
    let centers: Vec<f64> = (0..q).map(|_| rng.random_range(0.0..3.0)).collect();
    let values = Array2::from_shape_fn((ids.len(), q), |(_, j)| {
        (centers[j] + 0.5 * rng.sample::<f64, _>(StandardNormal)).exp()
    });
    EnvTable::new(ids.to_vec(), names.iter().map(|s| s.to_string()).collect(), values, group)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    let (genus, labels, metadata, signal) = generate_genus(spec)?;
    let levels = aggregate_levels(&genus)?;
    let soil = lognormal_table(&genus.sample_ids, &SOIL_FEATURES, EnvGroup::Soil, spec.seed)?;
    let ds = lognormal_table(&genus.sample_ids, &DS_FEATURES, EnvGroup::Ds, spec.seed)?;
    Ok(SynthData { levels, labels, metadata, soil, ds, signal })
}

/// Nine alpha-diversity indices per sample, computed from raw counts.
pub fn alpha_diversity(table: &OtuTable) -> Result<EnvTable> {
    let mut values = Array2::<f64>::zeros((table.n_samples(), ALPHA_FEATURES.len()));
    for (i, row) in table.counts.rows().into_iter().enumerate() {
        let total: f64 = row.sum();
        let present: Vec<f64> = row.iter().copied().filter(|&v| v > 0.0).collect();
        let s = present.len() as f64;
        let singletons = present.iter().filter(|&&v| v == 1.0).count() as f64;
        let doubletons = present.iter().filter(|&&v| v == 2.0).count() as f64;
        let chao1 = s + singletons * (singletons - 1.0).max(0.0) / (2.0 * (doubletons + 1.0));
        let (mut shannon, mut sum_sq, mut max_p) = (0.0, 0.0, 0.0f64);
        for &v in &present {
            let q = v / total;
            shannon -= q * q.ln();
            sum_sq += q * q;
            max_p = max_p.max(q);
        }
        let pielou = if s > 1.0 { shannon / s.ln() } else { 0.0 };
        let inv_simpson = if sum_sq > 0.0 { 1.0 / sum_sq } else { 0.0 };
        let margalef = if total > 1.0 { (s - 1.0) / total.ln() } else { 0.0 };
        let menhinick = if total > 0.0 { s / total.sqrt() } else { 0.0 };
        let simpson = if total > 0.0 { 1.0 - sum_sq } else { 0.0 };
        let row_vals = [s, chao1, shannon, simpson, inv_simpson, pielou, max_p, margalef, menhinick];
        for (j, v) in row_vals.into_iter().enumerate() {
            values[[i, j]] = v;
        }
    }
    EnvTable::new(
        table.sample_ids.clone(),
        ALPHA_FEATURES.iter().map(|s| s.to_string()).collect(),
        values,
        EnvGroup::Alpha,
    )
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(fs::File) -> Result<()>,
{
    f(fs::File::create(path)?)
}

/// Writes the dataset as CSVs plus `run.cfg` pointing at them; returns the
/// config path.
pub fn write_dataset(dir: &Path, data: &SynthData, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut cfg = String::from("# synthetic dataset\n");
    for t in &data.levels {
        let file = format!("otu_{}.csv", t.level.name().to_ascii_lowercase());
        write_with(&dir.join(&file), |w| t.write_csv(w))?;
        cfg.push_str(&format!("otu.{} = {file}\n", t.level.name().to_ascii_lowercase()));
    }
    write_with(&dir.join("metadata.csv"), |w| data.metadata.write_csv(w))?;
    write_with(&dir.join("soil.csv"), |w| data.soil.write_csv(w))?;
    write_with(&dir.join("ds.csv"), |w| data.ds.write_csv(w))?;
    fs::write(dir.join("signal.txt"), data.signal.join("\n") + "\n")?;
    cfg.push_str(&format!(
        "metadata = metadata.csv\nsoil = soil.csv\nds = ds.csv\nresponse = {}\nseed = {seed}\n",
        Response::Scabpit
    ));
    let path = dir.join("run.cfg");
    fs::write(&path, cfg)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_metadata, load_otu_table};

    #[test]
    fn shapes_and_round_robin() {
        let (t, l, m) = synth_generate(20, 40, 5, 5.0, 0.5, 1).unwrap();
        assert_eq!(t.counts.dim(), (20, 40));
        assert_eq!(l.len(), 20);
        assert_eq!(t.varieties[5], VARIETIES[1]);
        assert_eq!(m.labels_for(Response::Scabpit, &t.sample_ids).unwrap(), l);
        assert!(t.counts.iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
    }

    #[test]
    fn balanced_labels_within_three_sigma() {
        for seed in 0..5 {
            let (_, l, _) = synth_generate(200, 10, 1, 0.0, 0.5, seed).unwrap();
            let ones = l.count(1) as f64;
            // binomial sd = sqrt(200 * 0.25)
            assert!((ones - 100.0).abs() <= 3.0 * 50f64.sqrt(), "seed {seed}: {ones}");
        }
    }

    #[test]
    fn planted_columns_shift_means() {
        let data = generate(&SynthSpec { n: 400, ..SynthSpec::default() }).unwrap();
        let g = data.level(TaxonomicLevel::Genus);
        let y = &data.labels.labels;
        let ratio = |j: usize| {
            let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..g.n_samples() {
                if y[i] == 1 {
                    s1 += g.counts[[i, j]];
                    n1 += 1.0;
                } else {
                    s0 += g.counts[[i, j]];
                    n0 += 1.0;
                }
            }
            (s1 / n1) / (s0 / n0)
        };
        let cols = g.column_indices(&data.signal).unwrap();
        for j in cols {
            assert!((ratio(j) - 6.0).abs() < 2.0, "signal {j}: {}", ratio(j));
        }
        assert!((ratio(1) - 1.0).abs() < 0.5);
    }

    #[test]
    fn levels_preserve_depth() {
        let data = generate(&SynthSpec { n: 10, ..SynthSpec::default() }).unwrap();
        let widths: Vec<usize> = data.levels.iter().map(OtuTable::n_otus).collect();
        assert_eq!(widths, vec![3, 5, 10, 20, 40]);
        let genus_depth = data.level(TaxonomicLevel::Genus).depths();
        for t in &data.levels {
            assert_eq!(t.depths(), genus_depth);
        }
    }

    #[test]
    fn alpha_indices_by_hand() {
        let t = OtuTable::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into(), "z".into()],
            ndarray::array![[1.0, 1.0, 2.0], [0.0, 0.0, 5.0]],
            TaxonomicLevel::Genus,
        )
        .unwrap();
        let a = alpha_diversity(&t).unwrap();
        let r = a.values.row(0);
        assert_eq!(r[0], 3.0);
        // two singletons and one doubleton: 3 + 2*1/(2*2)
        assert!((r[1] - 3.5).abs() < 1e-12);
        let shannon = -(2.0 * 0.25 * 0.25f64.ln() + 0.5 * 0.5f64.ln());
        assert!((r[2] - shannon).abs() < 1e-12);
        assert!((r[3] - 0.625).abs() < 1e-12);
        assert!((r[6] - 0.5).abs() < 1e-12);
        let r = a.values.row(1);
        assert_eq!((r[0], r[2], r[5]), (1.0, 0.0, 0.0));
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&SynthSpec { n: 12, p: 8, n_signal: 2, ..SynthSpec::default() }).unwrap();
        let cfg = write_dataset(dir.path(), &data, 3).unwrap();
        assert!(cfg.is_file());
        let g = load_otu_table(dir.path().join("otu_genus.csv"), TaxonomicLevel::Genus).unwrap();
        assert_eq!(g.counts, data.level(TaxonomicLevel::Genus).counts);
        let m = load_metadata(dir.path().join("metadata.csv")).unwrap();
        assert_eq!(m.varieties, data.metadata.varieties);
    }

    #[test]
    fn invalid_specs() {
        assert!(synth_generate(10, 3, 4, 1.0, 0.5, 0).is_err());
        assert!(synth_generate(10, 3, 1, -1.0, 0.5, 0).is_err());
        assert!(synth_generate(10, 3, 1, 1.0, 1.0, 0).is_err());
    }
}
