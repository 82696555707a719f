//! Single runs and the preprocessing grid (NM × level × augmentation).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ModelKind, OtuBlock, RfSearch, RunConfig};
use super::synth::{alpha_diversity, SynthData};
use crate::augment::{augment_training, AugmentSpec};
use crate::bnn::{classify, predict_bnn, train_bnn, BnnArchitecture, PriorSpec};
use crate::data::{
    filter_rare_otus, load_env_table, load_metadata, load_otu_table, BinaryLabels, EnvGroup, EnvTable, OtuTable,
    Response, TaxonomicLevel,
};
use crate::error::{Error, Result};
use crate::eval::{split, weighted_f1, Metrics, SplitPlan};
use crate::featsel::{select_features, FeatselConfig};
use crate::fms::FmsRecord;
use crate::learners::{fit_random_forest, grid_search_cv, paper_grid, ForestConfig};
use crate::preprocess::{apply_spec, scale_env, PreprocessSpec};
use crate::rng::derive_seed;

/// One taxonomic level's counts with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelData {
    pub table: OtuTable,
    pub labels: BinaryLabels,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Inputs {
    pub levels: BTreeMap<TaxonomicLevel, LevelData>,
    pub env: BTreeMap<EnvGroup, EnvTable>,
}

impl Inputs {
    /// Loads every file named by the config, filters rare OTUs, and attaches
    /// varieties and binarized labels from the metadata.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.check_inputs()?;
        let meta = load_metadata(cfg.metadata.as_ref().expect("checked"))?;
        let mut levels = BTreeMap::new();
        for (&level, path) in &cfg.otu_paths {
            let raw = load_otu_table(path, level)?;
            let table = filter_rare_otus(&raw, cfg.min_prevalence)?;
            let varieties = meta.varieties_for(&table.sample_ids)?;
            let table = table.with_varieties(varieties)?;
            let labels = meta.labels_for(cfg.response, &table.sample_ids)?;
            levels.insert(level, LevelData { table, labels });
        }
        let mut env = BTreeMap::new();
        for (&group, path) in &cfg.env_paths {
            env.insert(group, load_env_table(path, group)?);
        }
        Ok(Inputs { levels, env })
    }

    pub fn from_synth(data: &SynthData, response: Response) -> Result<Self> {
        let mut levels = BTreeMap::new();
        for t in &data.levels {
            let labels = data.metadata.labels_for(response, &t.sample_ids)?;
            levels.insert(t.level, LevelData { table: t.clone(), labels });
        }
        let env = BTreeMap::from([(EnvGroup::Soil, data.soil.clone()), (EnvGroup::Ds, data.ds.clone())]);
        Ok(Inputs { levels, env })
    }

    pub fn level(&self, level: TaxonomicLevel) -> Result<&LevelData> {
        self.levels
            .get(&level)
            .ok_or_else(|| Error::Config(format!("no OTU table configured for level {level}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub nm: u8,
    pub level: TaxonomicLevel,
    pub aug: bool,
}

impl Cell {
    pub fn of(cfg: &RunConfig) -> Self {
        Cell { nm: cfg.nm, level: cfg.level, aug: cfg.aug }
    }
}

/// Grid cells in canonical (NM, level, aug) order.
pub fn grid_cells(cfg: &RunConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &nm in &cfg.grid_nm {
        for &level in &cfg.grid_levels {
            for &aug in &cfg.grid_aug {
                cells.push(Cell { nm, level, aug });
            }
        }
    }
    cells
}

/// Seeds of one cell. The split is shared by every cell and the
/// preprocessing seed does not depend on augmentation, so both arms of the
/// augmentation comparison see the same test samples and normalized data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSeeds {
    pub split: u64,
    pub preprocess: u64,
    pub select: u64,
    pub augment: u64,
    pub model: u64,
}

impl CellSeeds {
    pub fn new(master: u64, cell: Cell) -> Self {
        let base = [u64::from(cell.nm), cell.level.index() as u64];
        let with_aug = [base[0], base[1], u64::from(cell.aug)];
        CellSeeds {
            split: derive_seed(master, &[0x5B11]),
            preprocess: derive_seed(master, &[base[0], base[1], 1]),
            select: derive_seed(master, &[base[0], base[1], 2]),
            augment: derive_seed(master, &[with_aug[0], with_aug[1], with_aug[2], 3]),
            model: derive_seed(master, &[with_aug[0], with_aug[1], with_aug[2], 4]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub response: String,
    pub predictors: String,
    pub model: String,
    pub nm_index: usize,
    pub nm: String,
    pub level: TaxonomicLevel,
    pub aug: u8,
    pub env_scaler: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub weighted_f1: Option<f64>,
    pub f1_class0: Option<f64>,
    pub f1_class1: Option<f64>,
    pub model_summary: Option<String>,
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn fms_record(&self) -> Option<FmsRecord> {
        self.weighted_f1.map(|f| FmsRecord { aug: self.aug, nm_index: self.nm_index, level: self.level, weighted_f1: f })
    }
}

/// Predictor matrices after preprocessing, selection, scaling and (optional)
/// augmentation of the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub train_x: Array2<f64>,
    pub train_y: Vec<u8>,
    pub test_x: Array2<f64>,
    pub test_y: Vec<u8>,
    pub n_synthetic: usize,
}

pub fn build_design(cfg: &RunConfig, data: &LevelData, env: &BTreeMap<EnvGroup, EnvTable>, cell: Cell, seeds: &CellSeeds) -> Result<Design> {
    let table = &data.table;
    let y = &data.labels.labels;
    let plan = SplitPlan { test_fraction: cfg.test_fraction, folds: cfg.folds, stratified: true, seed: seeds.split };
    let sp = split(table.n_samples(), y, &plan)?;
    let train_y: Vec<u8> = sp.train.iter().map(|&i| y[i]).collect();
    let mut names: Vec<String> = Vec::new();
    let mut blocks: Vec<Array2<f64>> = Vec::new();

    if let Some(block) = cfg.predictors.otu_block() {
        let spec = PreprocessSpec::from_index(cell.nm)?.with_seed(seeds.preprocess);
        let norm = apply_spec(table, &spec)?;
        let cols: Vec<usize> = match block {
            OtuBlock::All => (0..norm.n_otus()).collect(),
            OtuBlock::Scored(score) => {
                let fs = FeatselConfig { fraction: cfg.featsel_fraction, seed: seeds.select, ..FeatselConfig::default() };
                let x_train = norm.counts.select(Axis(0), &sp.train);
                let sel = select_features(&x_train, &train_y, &norm.otu_names, &fs)?;
                let chosen = sel.subsets.get(score);
                if chosen.is_empty() {
                    return Err(Error::EmptyTable(format!("OTU-S{score} is empty at {}", cell.level)));
                }
                norm.column_indices(chosen)?
            }
        };
        names.extend(cols.iter().map(|&j| norm.otu_names[j].clone()));
        blocks.push(norm.counts.select(Axis(1), &cols));
    }
    for group in cfg.predictors.env_groups() {
        let source = match (group, env.get(&group)) {
            (_, Some(t)) => t.align_to(&table.sample_ids)?,
            (EnvGroup::Alpha, None) => alpha_diversity(table)?,
            (g, None) => return Err(Error::Config(format!("predictor set {} needs a {g} table", cfg.predictors))),
        };
        let scaled = scale_env(&source, cfg.env_scaler, &sp.train)?;
        names.extend(scaled.feature_names.iter().map(|f| format!("{group}:{f}")));
        blocks.push(scaled.values);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let x = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let mut train_x = x.select(Axis(0), &sp.train);
    let mut train_y = train_y;
    let test_x = x.select(Axis(0), &sp.test);
    let test_y: Vec<u8> = sp.test.iter().map(|&i| y[i]).collect();
    let mut n_synthetic = 0;
    if cell.aug {
        let ids: Vec<String> = sp.train.iter().map(|&i| table.sample_ids[i].clone()).collect();
        let varieties: Vec<String> = sp.train.iter().map(|&i| table.varieties[i].clone()).collect();
        let clamp = train_x.iter().all(|&v| v >= 0.0);
        let block = OtuTable::new(ids, names.clone(), train_x, table.level)?.with_varieties(varieties)?;
        let spec = AugmentSpec {
            target_per_label: cfg.aug_target,
            noise_divisor: cfg.aug_divisor,
            clamp_at_zero: clamp,
            seed: seeds.augment,
        };
        let out = augment_training(&block, &BinaryLabels::new(data.labels.response.clone(), train_y), &spec)?;
        n_synthetic = out.n_synthetic();
        train_x = out.table.counts;
        train_y = out.labels.labels;
    }
    Ok(Design { names, train_x, train_y, test_x, test_y, n_synthetic })
}

/// Column standardization fitted on the training rows.
fn standardize(train: &Array2<f64>, test: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).expect("nonempty training rows");
    let sd = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    ((train - &mean) / &sd, (test - &mean) / &sd)
}

pub enum FitOutcome {
    Scored { predictions: Vec<u8>, summary: String },
    Skipped(String),
}

/// Fits the configured model on the design's training rows and predicts the
/// test rows.
pub fn fit_predict(cfg: &RunConfig, design: &Design, seed: u64) -> Result<FitOutcome> {
    match cfg.model {
        ModelKind::Rf => {
            let (forest_cfg, note) = match cfg.rf_search {
                RfSearch::Fixed => (ForestConfig { n_estimators: cfg.rf_trees, seed, ..ForestConfig::default() }, String::new()),
                RfSearch::Grid => {
                    let grid = paper_grid(seed);
                    let res = grid_search_cv(&grid, &design.train_x, &design.train_y, cfg.folds, derive_seed(seed, &[1]))?;
                    (res.best, format!(" cv_f1={:.4}", res.best_score))
                }
            };
            let forest = fit_random_forest(&design.train_x, &design.train_y, &forest_cfg)?;
            let depth = forest_cfg.max_depth.map_or("none".to_string(), |d| d.to_string());
            let summary = format!(
                "rf n_estimators={} min_samples_split={} min_samples_leaf={} max_depth={depth} criterion={:?}{note}",
                forest_cfg.n_estimators, forest_cfg.min_samples_split, forest_cfg.min_samples_leaf, forest_cfg.criterion
            );
            Ok(FitOutcome::Scored { predictions: forest.predict(&design.test_x), summary })
        }
        ModelKind::Bnn => {
            let arch = BnnArchitecture::paper(design.names.len());
            if arch.n_weights() > cfg.bnn_max_weights {
                return Ok(FitOutcome::Skipped(format!(
                    "skipped: capacity ({} weights exceed the limit of {})",
                    arch.n_weights(),
                    cfg.bnn_max_weights
                )));
            }
            let (train, test) = standardize(&design.train_x, &design.test_x);
            let samples = train_bnn(&train, &design.train_y, &arch, &PriorSpec::new(&arch), &cfg.hmc(seed))?;
            let proba = predict_bnn(&samples, &test)?;
            let summary = format!(
                "bnn weights={} draws={} acceptance={:.3} step={:.4e}",
                arch.n_weights(),
                samples.draws.len(),
                samples.acceptance_rate,
                samples.final_step_size
            );
            Ok(FitOutcome::Scored { predictions: classify(&proba), summary })
        }
    }
}

/// Weighted F1 of one cell on the given data, for baseline replicates.
pub fn score_level(cfg: &RunConfig, data: &LevelData, env: &BTreeMap<EnvGroup, EnvTable>, cell: Cell, seeds: &CellSeeds) -> Result<Metrics> {
    let design = build_design(cfg, data, env, cell, seeds)?;
    match fit_predict(cfg, &design, seeds.model)? {
        FitOutcome::Scored { predictions, .. } => weighted_f1(&design.test_y, &predictions),
        FitOutcome::Skipped(reason) => Err(Error::Config(reason)),
    }
}

fn blank_record(cfg: &RunConfig, cell: Cell, seeds: &CellSeeds) -> ResultRecord {
    let nm = PreprocessSpec::from_index(cell.nm).map(|s| s.to_string()).unwrap_or_default();
    ResultRecord {
        response: cfg.response.to_string(),
        predictors: cfg.predictors.to_string(),
        model: cfg.model.to_string(),
        nm_index: usize::from(cell.nm),
        nm,
        level: cell.level,
        aug: u8::from(cell.aug),
        env_scaler: cfg.env_scaler.to_string(),
        seed: seeds.model,
        n_train: 0,
        n_test: 0,
        n_features: 0,
        weighted_f1: None,
        f1_class0: None,
        f1_class1: None,
        model_summary: None,
        error: None,
    }
}

fn score_cell(cfg: &RunConfig, inputs: &Inputs, cell: Cell, seeds: &CellSeeds, rec: &mut ResultRecord) -> Result<()> {
    let data = inputs.level(cell.level)?;
    let design = build_design(cfg, data, &inputs.env, cell, seeds)?;
    rec.n_train = design.train_y.len();
    rec.n_test = design.test_y.len();
    rec.n_features = design.names.len();
    match fit_predict(cfg, &design, seeds.model)? {
        FitOutcome::Scored { predictions, summary } => {
            let m: Metrics = weighted_f1(&design.test_y, &predictions)?;
            rec.weighted_f1 = Some(m.weighted_f1);
            rec.f1_class0 = Some(m.f1[0]);
            rec.f1_class1 = Some(m.f1[1]);
            rec.model_summary = Some(summary);
        }
        FitOutcome::Skipped(reason) => {
            info!("{}/NM{}/aug={}: {reason}", cell.level, cell.nm, u8::from(cell.aug));
            rec.error = Some(reason);
        }
    }
    Ok(())
}

/// Runs one cell. Failures are recorded in the `error` field rather than
/// propagated.
pub fn run_cell(cfg: &RunConfig, inputs: &Inputs, cell: Cell) -> ResultRecord {
    let seeds = CellSeeds::new(cfg.seed, cell);
    let mut rec = blank_record(cfg, cell, &seeds);
    if let Err(e) = score_cell(cfg, inputs, cell, &seeds, &mut rec) {
        warn!("{}/NM{}/aug={} failed: {e}", cell.level, cell.nm, u8::from(cell.aug));
        rec.error = Some(e.to_string());
    }
    rec
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutput {
    pub cells: Vec<Cell>,
    pub records: Vec<ResultRecord>,
    /// Wall-clock seconds per cell.
    pub seconds: Vec<f64>,
}

/// Runs every grid cell on a pool of `jobs` threads. Output order is the
/// canonical cell order whatever the execution order.
pub fn run_grid(cfg: &RunConfig, inputs: &Inputs, jobs: usize) -> Result<GridOutput> {
    let cells = grid_cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    let results: Vec<(ResultRecord, f64)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&c| {
                let start = Instant::now();
                let r = run_cell(cfg, inputs, c);
                (r, start.elapsed().as_secs_f64())
            })
            .collect()
    });
    let (records, seconds) = results.into_iter().unzip();
    Ok(GridOutput { cells, records, seconds })
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.jsonl`, `fms_records.jsonl` and `timings.tsv` (timings
/// are kept apart so the result files are reproducible byte for byte).
pub fn write_grid_output(dir: &Path, out: &GridOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(fs::File::create(dir.join("results.jsonl"))?, &out.records)?;
    let fms: Vec<FmsRecord> = out.records.iter().filter_map(ResultRecord::fms_record).collect();
    let excluded = out.records.len() - fms.len();
    if excluded > 0 {
        warn!("{excluded} cells produced no score and are left out of fms_records.jsonl");
    }
    write_jsonl(fs::File::create(dir.join("fms_records.jsonl"))?, &fms)?;
    let mut t = String::from("nm\tlevel\taug\tseconds\n");
    for (c, s) in out.cells.iter().zip(&out.seconds) {
        t.push_str(&format!("{}\t{}\t{}\t{s:.3}\n", c.nm, c.level, u8::from(c.aug)));
    }
    fs::write(dir.join("timings.tsv"), t)?;
    Ok(())
}
