//! Zero replacement, count normalization and environmental scaling.
//!
//! The four zero-replacement strategies and five normalizations combine into
//! the 20 canonical preprocessing options `NM1`..`NM20`, enumerated by
//! [`preprocess_grid`] in normalization-major order.

use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{EnvTable, OtuTable};
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::stats::{mean, median, population_sd, quantile_sorted, sorted};

pub const DEFAULT_PSEUDO_COUNT: f64 = 1.0;
pub const DEFAULT_PRIOR_STRENGTH: f64 = 0.5;
pub const DEFAULT_CSS_QUANTILE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZeroReplacement {
    None,
    /// Every zero becomes `pseudo_count`.
    Pseudo { pseudo_count: f64 },
    /// Zeros become `delta` (a proportion of the row total) and nonzero cells
    /// shrink multiplicatively so the row total is preserved. `None` uses
    /// half the smallest nonzero proportion of each row.
    MultRepl { delta: Option<f64> },
    /// Zeros become their posterior-mean multinomial proportion under a
    /// symmetric Dirichlet prior with total concentration `prior_strength`;
    /// nonzero cells shrink multiplicatively to restore the row total.
    BayesMult { prior_strength: f64 },
}

impl ZeroReplacement {
    pub const NAMES: [&'static str; 4] = ["none", "pseudo", "multRepl", "bayesMult"];

    pub fn pseudo() -> Self {
        ZeroReplacement::Pseudo { pseudo_count: DEFAULT_PSEUDO_COUNT }
    }

    pub fn mult_repl() -> Self {
        ZeroReplacement::MultRepl { delta: None }
    }

    pub fn bayes_mult() -> Self {
        ZeroReplacement::BayesMult { prior_strength: DEFAULT_PRIOR_STRENGTH }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ZeroReplacement::None => "none",
            ZeroReplacement::Pseudo { .. } => "pseudo",
            ZeroReplacement::MultRepl { .. } => "multRepl",
            ZeroReplacement::BayesMult { .. } => "bayesMult",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = match *self {
            ZeroReplacement::None => false,
            ZeroReplacement::Pseudo { pseudo_count } => !(pseudo_count > 0.0),
            ZeroReplacement::MultRepl { delta } => delta.is_some_and(|d| !(d > 0.0)),
            ZeroReplacement::BayesMult { prior_strength } => !(prior_strength > 0.0),
        };
        if bad {
            return Err(Error::InvalidArgument(format!(
                "{} parameter must be strictly positive",
                self.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    Tss,
    Css { quantile: f64 },
    Com,
    Rarefy { seed: u64 },
    Clr,
}

impl Normalization {
    pub fn name(&self) -> &'static str {
        match self {
            Normalization::Tss => "TSS",
            Normalization::Css { .. } => "CSS",
            Normalization::Com => "COM",
            Normalization::Rarefy { .. } => "rarefy",
            Normalization::Clr => "clr",
        }
    }
}

/// One of the 20 zero-replacement × normalization combinations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessSpec {
    pub index: u8,
    pub zero: ZeroReplacement,
    pub norm: Normalization,
}

impl PreprocessSpec {
    /// Spec for `NM<index>` with default parameters.
    pub fn from_index(index: u8) -> Result<Self> {
        if !(1..=20).contains(&index) {
            return Err(Error::InvalidArgument(format!("NM index {index} outside 1..=20")));
        }
        let i = index - 1;
        let norm = match i / 4 {
            0 => Normalization::Tss,
            1 => Normalization::Css { quantile: DEFAULT_CSS_QUANTILE },
            2 => Normalization::Com,
            3 => Normalization::Rarefy { seed: 0 },
            _ => Normalization::Clr,
        };
        let zero = match i % 4 {
            0 => ZeroReplacement::None,
            1 => ZeroReplacement::pseudo(),
            2 => ZeroReplacement::mult_repl(),
            _ => ZeroReplacement::bayes_mult(),
        };
        Ok(PreprocessSpec { index, zero, norm })
    }

    /// Same spec with the rarefaction seed replaced.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let Normalization::Rarefy { .. } = self.norm {
            self.norm = Normalization::Rarefy { seed };
        }
        self
    }
}

impl fmt::Display for PreprocessSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NM{}:{}+{}", self.index, self.norm.name(), self.zero.name())
    }
}

impl FromStr for PreprocessSpec {
    type Err = Error;

    /// Accepts `NM6`, `NM6:CSS+pseudo`, `NM_6` or `6`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, tail) = match s.split_once(':') {
            Some((h, t)) => (h, Some(t)),
            None => (s, None),
        };
        let digits = head.trim_start_matches("NM").trim_start_matches('_');
        let index: u8 = digits
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("cannot parse preprocessing spec '{s}'")))?;
        let spec = PreprocessSpec::from_index(index)?;
        if let Some(t) = tail {
            let expected = format!("{}+{}", spec.norm.name(), spec.zero.name());
            if t != expected {
                return Err(Error::InvalidArgument(format!(
                    "'{s}' does not match canonical NM{index}:{expected}"
                )));
            }
        }
        Ok(spec)
    }
}

impl Serialize for PreprocessSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PreprocessSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The 20 canonical preprocessing options, `NM1:TSS+none` .. `NM20:clr+bayesMult`.
pub fn preprocess_grid() -> Vec<PreprocessSpec> {
    (1..=20).map(|i| PreprocessSpec::from_index(i).unwrap()).collect()
}

fn check_non_negative(table: &OtuTable) -> Result<()> {
    if let Some(((i, j), _)) = table.counts.indexed_iter().find(|(_, v)| **v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "count-scale operation on negative entry at ({},{})",
            i + 1,
            j + 1
        )));
    }
    Ok(())
}

pub fn replace_zeros(table: &OtuTable, method: ZeroReplacement) -> Result<OtuTable> {
    method.validate()?;
    if method == ZeroReplacement::None {
        return Ok(table.clone());
    }
    check_non_negative(table)?;
    let mut out = table.clone();
    for (k, mut row) in out.counts.axis_iter_mut(Axis(0)).enumerate() {
        let total: f64 = row.sum();
        if total <= 0.0 {
            return Err(Error::EmptyTable(format!(
                "sample '{}' is entirely zero; cannot replace zeros",
                table.sample_ids[k]
            )));
        }
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if zeros == 0 {
            continue;
        }
        match method {
            ZeroReplacement::None => unreachable!(),
            ZeroReplacement::Pseudo { pseudo_count } => {
                row.mapv_inplace(|v| if v == 0.0 { pseudo_count } else { v });
            }
            ZeroReplacement::MultRepl { delta } => {
                let delta = delta.unwrap_or_else(|| {
                    let min_nz = row.iter().filter(|&&v| v > 0.0).fold(f64::INFINITY, |a, &b| a.min(b));
                    // capped so that the non-zero parts keep at least half the mass
                    (0.5 * min_nz / total).min(0.5 / (zeros as f64 + 1.0))
                });
                let shrink = 1.0 - zeros as f64 * delta;
                if shrink <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "multRepl delta {delta} too large for sample '{}' with {zeros} zeros",
                        table.sample_ids[k]
                    )));
                }
                row.mapv_inplace(|v| if v == 0.0 { delta * total } else { v * shrink });
            }
            ZeroReplacement::BayesMult { prior_strength } => {
                let p = row.len() as f64;
                let zero_prop = (prior_strength / p) / (total + prior_strength);
                let shrink = 1.0 - zeros as f64 * zero_prop;
                row.mapv_inplace(|v| if v == 0.0 { zero_prop * total } else { v * shrink });
            }
        }
    }
    Ok(out)
}

pub fn normalize(table: &OtuTable, method: Normalization) -> Result<OtuTable> {
    let mut out = table.clone();
    match method {
        Normalization::Tss => {
            check_non_negative(table)?;
            let depths = positive_depths(table)?;
            for (mut row, d) in out.counts.axis_iter_mut(Axis(0)).zip(depths) {
                row.mapv_inplace(|v| v / d);
            }
        }
        Normalization::Com => {
            check_non_negative(table)?;
            let depths = positive_depths(table)?;
            let min = depths.iter().cloned().fold(f64::INFINITY, f64::min);
            for (mut row, d) in out.counts.axis_iter_mut(Axis(0)).zip(depths) {
                row.mapv_inplace(|v| v * min / d);
            }
        }
        Normalization::Css { quantile } => {
            if !(quantile > 0.0 && quantile < 1.0) {
                return Err(Error::InvalidArgument(format!("CSS quantile {quantile} outside (0,1)")));
            }
            check_non_negative(table)?;
            let factors = css_factors(table, quantile)?;
            let reference = median(&factors);
            for (mut row, s) in out.counts.axis_iter_mut(Axis(0)).zip(factors) {
                row.mapv_inplace(|v| v / s * reference);
            }
        }
        Normalization::Rarefy { seed } => {
            out.counts = rarefy(table, seed)?;
        }
        Normalization::Clr => {
            if let Some(((i, j), _)) = table.counts.indexed_iter().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "clr requires strictly positive entries; found {} at ({},{})",
                    table.counts[[i, j]],
                    i + 1,
                    j + 1
                )));
            }
            for mut row in out.counts.axis_iter_mut(Axis(0)) {
                row.mapv_inplace(f64::ln);
                let m = row.mean().unwrap_or(0.0);
                row.mapv_inplace(|v| v - m);
            }
        }
    }
    Ok(out)
}

fn positive_depths(table: &OtuTable) -> Result<Vec<f64>> {
    let depths = table.depths();
    if let Some(k) = depths.iter().position(|&d| d <= 0.0) {
        return Err(Error::EmptyTable(format!("sample '{}' has zero depth", table.sample_ids[k])));
    }
    Ok(depths)
}

/// Cumulative-sum scaling factor of each row: the sum of the row's nonzero
/// values that do not exceed the row's `quantile` of nonzero values.
pub fn css_factors(table: &OtuTable, quantile: f64) -> Result<Vec<f64>> {
    table
        .counts
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(k, row)| {
            let nz: Vec<f64> = row.iter().copied().filter(|&v| v > 0.0).collect();
            let v = sorted(&nz);
            let q = quantile_sorted(&v, quantile);
            let s: f64 = v.iter().take_while(|&&x| x <= q).sum();
            if s > 0.0 {
                Ok(s)
            } else {
                Err(Error::EmptyTable(format!(
                    "sample '{}' has no nonzero counts for CSS",
                    table.sample_ids[k]
                )))
            }
        })
        .collect()
}

/// Subsamples every row without replacement down to the smallest depth.
fn rarefy(table: &OtuTable, seed: u64) -> Result<Array2<f64>> {
    let mut ints = Array2::<u64>::zeros(table.counts.dim());
    for ((i, j), &v) in table.counts.indexed_iter() {
        let r = v.round();
        if (v - r).abs() > 1e-9 || r < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "rarefy requires non-negative integer counts; found {v} at ({},{})",
                i + 1,
                j + 1
            )));
        }
        ints[[i, j]] = r as u64;
    }
    let depths: Vec<u64> = ints.axis_iter(Axis(0)).map(|r| r.sum()).collect();
    let threshold = depths.iter().copied().min().unwrap_or(0);
    if threshold < 1 {
        return Err(Error::InvalidArgument(
            "rarefy requires every sample depth to be at least 1".into(),
        ));
    }
    let mut out = Array2::<f64>::zeros(table.counts.dim());
    for (k, row) in ints.axis_iter(Axis(0)).enumerate() {
        let mut rng = derived_rng(seed, &[k as u64]);
        // positions of the kept reads, with reads laid out OTU by OTU
        let mut kept = sample(&mut rng, depths[k] as usize, threshold as usize).into_vec();
        kept.sort_unstable();
        let mut kept = kept.into_iter().peekable();
        let mut end = 0usize;
        for (j, &c) in row.iter().enumerate() {
            end += c as usize;
            let mut h = 0u64;
            while kept.next_if(|&pos| pos < end).is_some() {
                h += 1;
            }
            out[[k, j]] = h as f64;
        }
    }
    Ok(out)
}

/// Applies one of the 20 combinations to a raw count table.
///
/// Zero replacement runs first, except for rarefaction, which needs integer
/// counts and therefore runs before the zero replacement. `clr+none` falls
/// back to a pseudo count of 1 when zeros are present.
pub fn apply_spec(table: &OtuTable, spec: &PreprocessSpec) -> Result<OtuTable> {
    match (spec.norm, spec.zero) {
        (Normalization::Rarefy { .. }, zero) => replace_zeros(&normalize(table, spec.norm)?, zero),
        (Normalization::Clr, ZeroReplacement::None) => {
            if table.counts.iter().any(|&v| v <= 0.0) {
                warn!("{spec}: zeros present, applying pseudo count 1 before clr");
                normalize(&replace_zeros(table, ZeroReplacement::pseudo())?, Normalization::Clr)
            } else {
                normalize(table, Normalization::Clr)
            }
        }
        (norm, zero) => normalize(&replace_zeros(table, zero)?, norm),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvScaler {
    Standardize,
    MinMax,
    MaxAbs,
    Robust,
    QuantileNormal,
    UnitNorm,
}

impl EnvScaler {
    pub const ALL: [EnvScaler; 6] = [
        EnvScaler::Standardize,
        EnvScaler::MinMax,
        EnvScaler::MaxAbs,
        EnvScaler::Robust,
        EnvScaler::QuantileNormal,
        EnvScaler::UnitNorm,
    ];
}

impl fmt::Display for EnvScaler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for EnvScaler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvScaler::ALL
            .iter()
            .copied()
            .find(|e| e.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scaler '{s}'")))
    }
}

/// Scales environmental features with statistics fitted on `fit_rows` only;
/// the fitted map is applied to every row.
pub fn scale_env(env: &EnvTable, method: EnvScaler, fit_rows: &[usize]) -> Result<EnvTable> {
    if fit_rows.is_empty() {
        return Err(Error::InvalidArgument("scale_env needs at least one fit row".into()));
    }
    if let Some(&r) = fit_rows.iter().find(|&&r| r >= env.n_samples()) {
        return Err(Error::InvalidArgument(format!("fit row {r} out of range")));
    }
    let mut out = env.clone();
    if method == EnvScaler::UnitNorm {
        for mut row in out.values.axis_iter_mut(Axis(0)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        return Ok(out);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    for (j, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
        let name = &env.feature_names[j];
        let fit: Vec<f64> = fit_rows.iter().map(|&r| env.values[[r, j]]).collect();
        match method {
            EnvScaler::Standardize => {
                let (m, sd) = (mean(&fit), population_sd(&fit));
                if sd > 0.0 {
                    col.mapv_inplace(|v| (v - m) / sd);
                } else {
                    warn!("feature '{name}' has zero variance; mapped to 0");
                    col.fill(0.0);
                }
            }
            EnvScaler::MinMax => {
                let lo = fit.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = fit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    col.mapv_inplace(|v| (v - lo) / (hi - lo));
                } else {
                    warn!("feature '{name}' has a degenerate range; mapped to 0");
                    col.fill(0.0);
                }
            }
            EnvScaler::MaxAbs => {
                let m = fit.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                let d = if m > 0.0 { m } else { 1.0 };
                col.mapv_inplace(|v| v / d);
            }
            EnvScaler::Robust => {
                let v = sorted(&fit);
                let med = quantile_sorted(&v, 0.5);
                let mut iqr = quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25);
                if !(iqr > 0.0) {
                    warn!("feature '{name}' has zero IQR; using divisor 1");
                    iqr = 1.0;
                }
                col.mapv_inplace(|x| (x - med) / iqr);
            }
            EnvScaler::QuantileNormal => {
                let v = sorted(&fit);
                col.mapv_inplace(|x| normal.inverse_cdf(empirical_cdf(&v, x)));
            }
            EnvScaler::UnitNorm => unreachable!(),
        }
    }
    Ok(out)
}

const CDF_BOUND: f64 = 1e-7;

/// Interpolated position of `x` in the sorted fit sample, mapped to [0,1].
/// Ties take the mid-rank of their block; values outside the fit range clip.
fn empirical_cdf(v: &[f64], x: f64) -> f64 {
    let m = v.len();
    if m < 2 {
        return 0.5;
    }
    let x = x.clamp(v[0], v[m - 1]);
    let below = v.partition_point(|&a| a < x);
    let upto = v.partition_point(|&a| a <= x);
    let rank = if upto > below {
        (below + upto - 1) as f64 / 2.0
    } else {
        let (lo, hi) = (v[below - 1], v[below]);
        (below - 1) as f64 + (x - lo) / (hi - lo)
    };
    (rank / (m - 1) as f64).clamp(CDF_BOUND, 1.0 - CDF_BOUND)
}
