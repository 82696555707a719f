//! Declarative run configuration in a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory of the config file. Keys:
//!
//! | key | value |
//! |-----|-------|
//! | `otu.<level>` | OTU count CSV for Phylum, Class, Order, Family or Genus |
//! | `metadata` | metadata CSV |
//! | `soil`, `ds`, `alpha` | environmental CSVs (alpha is computed from counts when absent) |
//! | `response` | response name, e.g. `Scabpit` |
//! | `predictors` | one of [`PredictorSet::NAMES`] |
//! | `model` | `rf` or `bnn` |
//! | `nm` | preprocessing option, `6` or `NM6:CSS+pseudo` |
//! | `level` | taxonomic level for single runs |
//! | `aug` | `0` or `1` |
//! | `env_scaler` | Standardize, MinMax, MaxAbs, Robust, QuantileNormal, UnitNorm |
//! | `seed` | master seed |
//! | `min_prevalence` | rare-OTU filter (samples with a nonzero count) |
//! | `test_fraction`, `folds` | split plan |
//! | `rf.search` | `fixed` or `grid` (72-point grid search) |
//! | `rf.trees` | trees for the fixed forest |
//! | `bnn.chain`, `bnn.leapfrog`, `bnn.step`, `bnn.max_weights`, `bnn.thin` | sampler settings |
//! | `aug.target`, `aug.divisor` | augmentation settings |
//! | `featsel.fraction` | fraction kept by each selection criterion |
//! | `grid.nm`, `grid.levels`, `grid.aug` | comma-separated grid dimensions |

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bnn::{HmcConfig, DEFAULT_MAX_WEIGHTS};
use crate::data::{EnvGroup, Response, TaxonomicLevel};
use crate::error::{Error, Result};
use crate::preprocess::{EnvScaler, PreprocessSpec};

/// Source of OTU predictors in a predictor set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtuBlock {
    All,
    /// OTUs with the given combined score (0..=3).
    Scored(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PredictorSet {
    AllOtu,
    OtuS0,
    OtuS1,
    OtuS2,
    OtuS3,
    Alpha,
    Soil,
    Ds,
    SoilDs,
    AlphaSoil,
    AlphaSoilDs,
    OtuS3Soil,
    OtuS3Ds,
    OtuS3SoilDs,
}

impl PredictorSet {
    pub const ALL: [PredictorSet; 14] = [
        PredictorSet::AllOtu,
        PredictorSet::OtuS0,
        PredictorSet::OtuS1,
        PredictorSet::OtuS2,
        PredictorSet::OtuS3,
        PredictorSet::Alpha,
        PredictorSet::Soil,
        PredictorSet::Ds,
        PredictorSet::SoilDs,
        PredictorSet::AlphaSoil,
        PredictorSet::AlphaSoilDs,
        PredictorSet::OtuS3Soil,
        PredictorSet::OtuS3Ds,
        PredictorSet::OtuS3SoilDs,
    ];

    pub const NAMES: [&'static str; 14] = [
        "ALL-OTU",
        "OTU-S0",
        "OTU-S1",
        "OTU-S2",
        "OTU-S3",
        "Alpha",
        "Soil",
        "DS",
        "Soil+DS",
        "Alpha+Soil",
        "Alpha+Soil+DS",
        "OTU-S3+Soil",
        "OTU-S3+DS",
        "OTU-S3+Soil+DS",
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }

    pub fn otu_block(self) -> Option<OtuBlock> {
        use PredictorSet::*;
        match self {
            AllOtu => Some(OtuBlock::All),
            OtuS0 => Some(OtuBlock::Scored(0)),
            OtuS1 => Some(OtuBlock::Scored(1)),
            OtuS2 => Some(OtuBlock::Scored(2)),
            OtuS3 | OtuS3Soil | OtuS3Ds | OtuS3SoilDs => Some(OtuBlock::Scored(3)),
            Alpha | Soil | Ds | SoilDs | AlphaSoil | AlphaSoilDs => None,
        }
    }

    /// Environmental blocks in concatenation order.
    pub fn env_groups(self) -> Vec<EnvGroup> {
        use PredictorSet::*;
        match self {
            AllOtu | OtuS0 | OtuS1 | OtuS2 | OtuS3 => vec![],
            Alpha => vec![EnvGroup::Alpha],
            Soil | OtuS3Soil => vec![EnvGroup::Soil],
            Ds | OtuS3Ds => vec![EnvGroup::Ds],
            SoilDs | OtuS3SoilDs => vec![EnvGroup::Soil, EnvGroup::Ds],
            AlphaSoil => vec![EnvGroup::Alpha, EnvGroup::Soil],
            AlphaSoilDs => vec![EnvGroup::Alpha, EnvGroup::Soil, EnvGroup::Ds],
        }
    }
}

impl fmt::Display for PredictorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredictorSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Config(format!("unknown predictor set '{s}'; expected one of {}", Self::NAMES.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rf,
    Bnn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Rf => "rf",
            ModelKind::Bnn => "bnn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rf" => Ok(ModelKind::Rf),
            "bnn" => Ok(ModelKind::Bnn),
            _ => Err(Error::Config(format!("unknown model '{s}'; expected rf or bnn"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfSearch {
    Fixed,
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub otu_paths: BTreeMap<TaxonomicLevel, PathBuf>,
    pub metadata: Option<PathBuf>,
    pub env_paths: BTreeMap<EnvGroup, PathBuf>,
    pub response: Response,
    pub predictors: PredictorSet,
    pub model: ModelKind,
    pub nm: u8,
    pub level: TaxonomicLevel,
    pub aug: bool,
    pub env_scaler: EnvScaler,
    pub seed: u64,
    pub min_prevalence: usize,
    pub test_fraction: f64,
    pub folds: usize,
    pub rf_search: RfSearch,
    pub rf_trees: usize,
    pub bnn_chain: usize,
    pub bnn_leapfrog: usize,
    pub bnn_step: f64,
    pub bnn_max_weights: usize,
    pub bnn_thin: usize,
    pub aug_target: usize,
    pub aug_divisor: f64,
    pub featsel_fraction: f64,
    pub grid_nm: Vec<u8>,
    pub grid_levels: Vec<TaxonomicLevel>,
    pub grid_aug: Vec<bool>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hmc = HmcConfig::default();
        RunConfig {
            otu_paths: BTreeMap::new(),
            metadata: None,
            env_paths: BTreeMap::new(),
            response: Response::Scabpit,
            predictors: PredictorSet::AllOtu,
            model: ModelKind::Rf,
            nm: 1,
            level: TaxonomicLevel::Genus,
            aug: false,
            env_scaler: EnvScaler::Standardize,
            seed: 0,
            min_prevalence: 1,
            test_fraction: 0.2,
            folds: 10,
            rf_search: RfSearch::Fixed,
            rf_trees: 100,
            bnn_chain: hmc.chain_length,
            bnn_leapfrog: hmc.leapfrog_length,
            bnn_step: hmc.step_size,
            bnn_max_weights: DEFAULT_MAX_WEIGHTS,
            bnn_thin: 1,
            aug_target: 400,
            aug_divisor: 100.0,
            featsel_fraction: 0.3,
            grid_nm: (1..=20).collect(),
            grid_levels: TaxonomicLevel::ALL.to_vec(),
            grid_aug: vec![false, true],
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{v}' for '{key}'"))),
    }
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn parse_nm(v: &str) -> Result<u8> {
    PreprocessSpec::from_str(v).map(|s| s.index).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim(), base)?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let cfg_err = |e: Error| Error::Config(e.to_string());
        match key {
            "metadata" => self.metadata = Some(path(v)),
            "soil" | "ds" | "alpha" => {
                let g = EnvGroup::from_str(key).map_err(cfg_err)?;
                self.env_paths.insert(g, path(v));
            }
            k if k.starts_with("otu.") => {
                let level = TaxonomicLevel::from_str(&k[4..]).map_err(cfg_err)?;
                self.otu_paths.insert(level, path(v));
            }
            "response" => self.response = Response::from_str(v).map_err(cfg_err)?,
            "predictors" => self.predictors = v.parse()?,
            "model" => self.model = v.parse()?,
            "nm" => self.nm = parse_nm(v)?,
            "level" => self.level = TaxonomicLevel::from_str(v).map_err(cfg_err)?,
            "aug" => self.aug = parse_bool(key, v)?,
            "env_scaler" => self.env_scaler = EnvScaler::from_str(v).map_err(cfg_err)?,
            "seed" => self.seed = parse_num(key, v)?,
            "min_prevalence" => self.min_prevalence = parse_num(key, v)?,
            "test_fraction" => self.test_fraction = parse_num(key, v)?,
            "folds" => self.folds = parse_num(key, v)?,
            "rf.search" => {
                self.rf_search = match v {
                    "fixed" => RfSearch::Fixed,
                    "grid" => RfSearch::Grid,
                    _ => return Err(Error::Config(format!("rf.search must be fixed or grid, got '{v}'"))),
                }
            }
            "rf.trees" => self.rf_trees = parse_num(key, v)?,
            "bnn.chain" => self.bnn_chain = parse_num(key, v)?,
            "bnn.leapfrog" => self.bnn_leapfrog = parse_num(key, v)?,
            "bnn.step" => self.bnn_step = parse_num(key, v)?,
            "bnn.max_weights" => self.bnn_max_weights = parse_num(key, v)?,
            "bnn.thin" => self.bnn_thin = parse_num(key, v)?,
            "aug.target" => self.aug_target = parse_num(key, v)?,
            "aug.divisor" => self.aug_divisor = parse_num(key, v)?,
            "featsel.fraction" => self.featsel_fraction = parse_num(key, v)?,
            "grid.nm" => self.grid_nm = parse_list(v, parse_nm)?,
            "grid.levels" => {
                self.grid_levels = parse_list(v, |s| TaxonomicLevel::from_str(s).map_err(cfg_err))?
            }
            "grid.aug" => self.grid_aug = parse_list(v, |s| parse_bool(key, s))?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} outside (0,1)", self.test_fraction)));
        }
        if self.folds < 2 || self.rf_trees == 0 || self.bnn_chain == 0 || self.bnn_thin == 0 {
            return Err(Error::Config("folds >= 2 and positive tree, chain and thinning counts required".into()));
        }
        if !(self.bnn_step > 0.0) || !(self.aug_divisor > 0.0) || self.aug_target == 0 {
            return Err(Error::Config("step size, augmentation divisor and target must be positive".into()));
        }
        if !(self.featsel_fraction > 0.0 && self.featsel_fraction <= 1.0) {
            return Err(Error::Config("featsel.fraction must lie in (0,1]".into()));
        }
        Ok(())
    }

    /// Checks that every referenced input file exists.
    pub fn check_inputs(&self) -> Result<()> {
        let paths = self.otu_paths.values().chain(self.metadata.iter()).chain(self.env_paths.values());
        for p in paths {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if self.metadata.is_none() {
            return Err(Error::Config("config names no metadata file".into()));
        }
        Ok(())
    }

    pub fn hmc(&self, seed: u64) -> HmcConfig {
        HmcConfig {
            leapfrog_length: self.bnn_leapfrog,
            step_size: self.bnn_step,
            chain_length: self.bnn_chain,
            thin: self.bnn_thin,
            max_weights: self.bnn_max_weights,
            seed,
            ..HmcConfig::default()
        }
    }

    /// Renders the config back to text; parsing the output reproduces it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (level, p) in &self.otu_paths {
            let _ = writeln!(s, "otu.{} = {}", level.name().to_ascii_lowercase(), p.display());
        }
        if let Some(m) = &self.metadata {
            let _ = writeln!(s, "metadata = {}", m.display());
        }
        for (g, p) in &self.env_paths {
            let _ = writeln!(s, "{} = {}", g.name().to_ascii_lowercase(), p.display());
        }
        let join = |v: Vec<String>| v.join(",");
        let _ = write!(
            s,
            "response = {}\npredictors = {}\nmodel = {}\nnm = {}\nlevel = {}\naug = {}\nenv_scaler = {}\n\
             seed = {}\nmin_prevalence = {}\ntest_fraction = {}\nfolds = {}\nrf.search = {}\nrf.trees = {}\n\
             bnn.chain = {}\nbnn.leapfrog = {}\nbnn.step = {}\nbnn.max_weights = {}\nbnn.thin = {}\n\
             aug.target = {}\naug.divisor = {}\nfeatsel.fraction = {}\ngrid.nm = {}\ngrid.levels = {}\ngrid.aug = {}\n",
            self.response,
            self.predictors,
            self.model,
            self.nm,
            self.level,
            u8::from(self.aug),
            self.env_scaler,
            self.seed,
            self.min_prevalence,
            self.test_fraction,
            self.folds,
            match self.rf_search {
                RfSearch::Fixed => "fixed",
                RfSearch::Grid => "grid",
            },
            self.rf_trees,
            self.bnn_chain,
            self.bnn_leapfrog,
            self.bnn_step,
            self.bnn_max_weights,
            self.bnn_thin,
            self.aug_target,
            self.aug_divisor,
            self.featsel_fraction,
            join(self.grid_nm.iter().map(u8::to_string).collect()),
            join(self.grid_levels.iter().map(|l| l.name().to_string()).collect()),
            join(self.grid_aug.iter().map(|a| u8::from(*a).to_string()).collect()),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourteen_predictor_sets_round_trip() {
        assert_eq!(PredictorSet::ALL.len(), 14);
        for p in PredictorSet::ALL {
            assert_eq!(p.name().parse::<PredictorSet>().unwrap(), p);
        }
        assert!("OTU-S4".parse::<PredictorSet>().is_err());
        assert_eq!(PredictorSet::OtuS3SoilDs.otu_block(), Some(OtuBlock::Scored(3)));
        assert_eq!(PredictorSet::OtuS3SoilDs.env_groups(), vec![EnvGroup::Soil, EnvGroup::Ds]);
        assert_eq!(PredictorSet::Alpha.otu_block(), None);
    }

    #[test]
    fn parses_and_resolves_paths() {
        let text = "# run\notu.genus = g.csv\nmetadata = /abs/meta.csv\nsoil = soil.csv\n\
                    predictors = OTU-S3+Soil\nmodel = bnn\nnm = NM6:CSS+pseudo\nlevel = order\naug = 1\n\
                    grid.nm = 1, 6\ngrid.aug = 0\nrf.search = grid\n";
        let cfg = RunConfig::parse(text, Path::new("/data")).unwrap();
        assert_eq!(cfg.otu_paths[&TaxonomicLevel::Genus], PathBuf::from("/data/g.csv"));
        assert_eq!(cfg.metadata, Some(PathBuf::from("/abs/meta.csv")));
        assert_eq!(cfg.env_paths[&EnvGroup::Soil], PathBuf::from("/data/soil.csv"));
        assert_eq!(cfg.predictors, PredictorSet::OtuS3Soil);
        assert_eq!(cfg.model, ModelKind::Bnn);
        assert_eq!((cfg.nm, cfg.level, cfg.aug), (6, TaxonomicLevel::Order, true));
        assert_eq!(cfg.grid_nm, vec![1, 6]);
        assert_eq!(cfg.grid_aug, vec![false]);
        assert_eq!(cfg.rf_search, RfSearch::Grid);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("otu.phylum", "p.csv", Path::new("/x")).unwrap();
        cfg.set("seed", "42", Path::new("/x")).unwrap();
        cfg.set("bnn.step", "0.05", Path::new("/x")).unwrap();
        let again = RunConfig::parse(&cfg.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new(".");
        assert!(RunConfig::parse("colour = red", base).is_err());
        assert!(RunConfig::parse("seed", base).is_err());
        assert!(RunConfig::parse("nm = 21", base).is_err());
        assert!(RunConfig::parse("test_fraction = 1.5", base).is_err());
        let err = RunConfig::parse("predictors = everything", base).unwrap_err();
        assert!(err.is_usage());
        let mut cfg = RunConfig::default();
        cfg.metadata = Some(PathBuf::from("/definitely/not/here.csv"));
        assert!(cfg.check_inputs().is_err());
    }
}
