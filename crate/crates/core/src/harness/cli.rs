//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 data error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use ndarray::Axis;
use serde::Deserialize;

use super::config::RunConfig;
use super::grid::{run_cell, run_grid, score_level, write_grid_output, Cell, CellSeeds, Inputs, LevelData};
use super::synth::{generate, write_dataset, SynthSpec};
use crate::augment::{augment_training, AugmentSpec};
use crate::data::{BinaryLabels, OtuTable, TaxonomicLevel};
use crate::error::{Error, Result};
use crate::eval::{exceedance_test, weighted_f1, BaselineStrategy};
use crate::featsel::{select_features, FeatselConfig};
use crate::fms::{fit_fms_tree, read_records, ExportFormat, TreeLimits};
use crate::netinfer::{compare_networks, infer_network};
use crate::preprocess::{apply_spec, scale_env, PreprocessSpec};
use crate::rng::derive_seed;

#[derive(Debug, Parser)]
#[command(name = "phenopred", version, about = "Phenotype prediction from microbiome count tables")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, env = "PHENO_JOBS")]
    jobs: Option<usize>,
    /// Run file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the run file.
#[derive(Debug, Args, Default)]
struct RunArgs {
    /// OTU table for the selected level.
    #[arg(long)]
    otu: Option<String>,
    #[arg(long)]
    metadata: Option<String>,
    #[arg(long)]
    soil: Option<String>,
    #[arg(long)]
    ds: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    response: Option<String>,
    #[arg(long)]
    predictors: Option<String>,
    /// rf or bnn.
    #[arg(long)]
    model: Option<String>,
    /// Preprocessing option, e.g. `6`, `NM6` or `CSS+pseudo`.
    #[arg(long)]
    nm: Option<String>,
    #[arg(long)]
    level: Option<String>,
    #[arg(long)]
    aug: Option<String>,
    #[arg(long)]
    env_scaler: Option<String>,
    /// Any other run-file key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize one OTU table and scale the environmental tables.
    Preprocess(RunArgs),
    /// Balance the classes of one normalized table with synthetic samples.
    Augment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Score OTUs with the seven criteria and the network comparison.
    SelectFeatures(RunArgs),
    /// Infer one network per class and compare node degrees.
    NetCompare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        ridge: Option<f64>,
    },
    /// Fit and score one configuration.
    Train(RunArgs),
    /// Weighted F1 of a CSV with `y_true` and `y_pred` columns.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Exceedance test against random baselines.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        /// Strategy 1 to 4.
        #[arg(long, default_value_t = 3)]
        strategy: usize,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha_level: f64,
    },
    /// Fit the model-selection regression tree to grid results.
    Fms {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_depth: usize,
        #[arg(long, default_value_t = 1)]
        min_leaf: usize,
    },
    /// Write a synthetic multi-level data set and a run file.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 40)]
        p: usize,
        #[arg(long, default_value_t = 5)]
        n_signal: usize,
        #[arg(long, default_value_t = 5.0)]
        effect: f64,
        #[arg(long, default_value_t = 0.5)]
        imbalance: f64,
    },
    /// Run every (NM, level, aug) cell of the grid.
    RunGrid(RunArgs),
}

fn apply_overrides(cfg: &mut RunConfig, args: &RunArgs) -> Result<()> {
    let here = Path::new(".");
    let named = [
        ("metadata", &args.metadata),
        ("soil", &args.soil),
        ("ds", &args.ds),
        ("alpha", &args.alpha),
        ("response", &args.response),
        ("predictors", &args.predictors),
        ("model", &args.model),
        ("nm", &args.nm),
        ("level", &args.level),
        ("aug", &args.aug),
        ("env_scaler", &args.env_scaler),
    ];
    for (key, v) in named {
        if let Some(v) = v {
            cfg.set(key, v, here)?;
        }
    }
    if let Some(otu) = &args.otu {
        cfg.set(&format!("otu.{}", cfg.level.name().to_ascii_lowercase()), otu, here)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim(), here)?;
    }
    Ok(())
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    jobs: usize,
}

impl Ctx {
    fn new(cli: &Cli, args: Option<&RunArgs>) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(args) = args {
            apply_overrides(&mut cfg, args)?;
        }
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let jobs = cli.jobs.unwrap_or(1);
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        Ok(Ctx { cfg, out: cli.out.clone(), jobs })
    }

    fn out_file(&self, name: &str) -> Result<BufWriter<File>> {
        fs::create_dir_all(&self.out)?;
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn level_data(&self) -> Result<(Inputs, LevelData)> {
        let inputs = Inputs::load(&self.cfg)?;
        let data = inputs.level(self.cfg.level)?.clone();
        Ok((inputs, data))
    }

    fn normalized(&self, data: &LevelData) -> Result<OtuTable> {
        let cell = Cell::of(&self.cfg);
        let spec = PreprocessSpec::from_index(cell.nm)?.with_seed(CellSeeds::new(self.cfg.seed, cell).preprocess);
        apply_spec(&data.table, &spec)
    }
}

fn level_tag(level: TaxonomicLevel) -> String {
    level.name().to_ascii_lowercase()
}

fn cmd_preprocess(ctx: &Ctx) -> Result<()> {
    let (inputs, data) = ctx.level_data()?;
    let norm = ctx.normalized(&data)?;
    let name = format!("normalized_{}_NM{}.csv", level_tag(ctx.cfg.level), ctx.cfg.nm);
    norm.write_csv(ctx.out_file(&name)?)?;
    let all: Vec<usize> = (0..data.table.n_samples()).collect();
    for (group, table) in &inputs.env {
        let scaled = scale_env(&table.align_to(&data.table.sample_ids)?, ctx.cfg.env_scaler, &all)?;
        scaled.write_csv(ctx.out_file(&format!("{}_{}.csv", group.name().to_ascii_lowercase(), ctx.cfg.env_scaler))?)?;
    }
    println!("{}", ctx.out.join(name).display());
    Ok(())
}

fn cmd_augment(ctx: &Ctx, target: Option<usize>) -> Result<()> {
    let (_, data) = ctx.level_data()?;
    let norm = ctx.normalized(&data)?;
    let spec = AugmentSpec {
        target_per_label: target.unwrap_or(ctx.cfg.aug_target),
        noise_divisor: ctx.cfg.aug_divisor,
        clamp_at_zero: norm.counts.iter().all(|&v| v >= 0.0),
        seed: derive_seed(ctx.cfg.seed, &[3]),
    };
    let out = augment_training(&norm, &data.labels, &spec)?;
    out.write_csv(ctx.out_file("augmented.csv")?)?;
    println!("{} original + {} synthetic rows", norm.n_samples(), out.n_synthetic());
    Ok(())
}

fn featsel_config(ctx: &Ctx) -> FeatselConfig {
    FeatselConfig { fraction: ctx.cfg.featsel_fraction, seed: derive_seed(ctx.cfg.seed, &[2]), ..FeatselConfig::default() }
}

fn cmd_select_features(ctx: &Ctx) -> Result<()> {
    let (_, data) = ctx.level_data()?;
    let norm = ctx.normalized(&data)?;
    let sel = select_features(&norm.counts, &data.labels.labels, &norm.otu_names, &featsel_config(ctx))?;
    sel.write_csv(ctx.out_file("scores.csv")?)?;
    let mut w = ctx.out_file("subsets.json")?;
    serde_json::to_writer_pretty(&mut w, &sel.subsets)?;
    w.flush()?;
    for k in 0..=3u8 {
        println!("OTU-S{k}: {}", sel.subsets.get(k).len());
    }
    Ok(())
}

fn cmd_net_compare(ctx: &Ctx, threshold: Option<f64>, ridge: Option<f64>) -> Result<()> {
    let (_, data) = ctx.level_data()?;
    let norm = ctx.normalized(&data)?;
    let fs = featsel_config(ctx);
    let (threshold, ridge) = (threshold.unwrap_or(fs.net_threshold), ridge.unwrap_or(fs.net_ridge));
    let y = &data.labels.labels;
    let mut nets = Vec::new();
    for class in 0..=1u8 {
        let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        let net = infer_network(&norm.counts.select(Axis(0), &rows), &norm.otu_names, threshold, ridge)?;
        fs::create_dir_all(&ctx.out)?;
        fs::write(ctx.out.join(format!("network_{class}.dot")), net.to_dot())?;
        nets.push(net);
    }
    let cmp = compare_networks(&nets[0], &nets[1])?;
    cmp.write_csv(ctx.out_file("degree_diff.csv")?)?;
    println!("edges: class 0 {}, class 1 {}", nets[0].edges().len(), nets[1].edges().len());
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let inputs = Inputs::load(&ctx.cfg)?;
    let rec = run_cell(&ctx.cfg, &inputs, Cell::of(&ctx.cfg));
    let json = serde_json::to_string(&rec)?;
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.out.join("result.json"), format!("{json}\n"))?;
    println!("{json}");
    match &rec.error {
        Some(e) if !e.starts_with("skipped") => Err(Error::Numerical(format!("run failed: {e}"))),
        _ => Ok(()),
    }
}

#[derive(Deserialize)]
struct PredictionRow {
    y_true: u8,
    y_pred: u8,
}

fn cmd_evaluate(predictions: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(predictions)
        .map_err(|e| Error::Ingest(format!("{}: {e}", predictions.display())))?;
    let rows: Vec<PredictionRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Ingest(format!("{}: {e}", predictions.display())))?;
    let t: Vec<u8> = rows.iter().map(|r| r.y_true).collect();
    let p: Vec<u8> = rows.iter().map(|r| r.y_pred).collect();
    println!("{}", serde_json::to_string(&weighted_f1(&t, &p)?)?);
    Ok(())
}

fn cmd_baseline(ctx: &Ctx, strategy: usize, n: usize, alpha: f64) -> Result<()> {
    let strategy = BaselineStrategy::from_number(strategy)?;
    let (inputs, data) = ctx.level_data()?;
    let cell = Cell::of(&ctx.cfg);
    let seeds = CellSeeds::new(ctx.cfg.seed, cell);
    let f_orig = score_level(&ctx.cfg, &data, &inputs.env, cell, &seeds)?.weighted_f1;
    let runner = |t: &OtuTable, l: &BinaryLabels, s: u64| {
        let d = LevelData { table: t.clone(), labels: l.clone() };
        score_level(&ctx.cfg, &d, &inputs.env, cell, &CellSeeds { model: s, ..seeds })
    };
    let pool = thread_pool(ctx.jobs)?;
    let res = pool.install(|| {
        exceedance_test(f_orig, strategy, &data.table, &data.labels, runner, n, alpha, derive_seed(ctx.cfg.seed, &[0xBA5E]))
    })?;
    res.write_csv(ctx.out_file("baseline.csv")?)?;
    println!("{}", res.summary_json()?);
    Ok(())
}

fn cmd_fms(ctx: &Ctx, input: &Path, max_depth: usize, min_leaf: usize) -> Result<()> {
    let file = File::open(input).map_err(|e| Error::Ingest(format!("{}: {e}", input.display())))?;
    let (records, excluded) = read_records(BufReader::new(file))?;
    info!("{} records, {excluded} excluded", records.len());
    let tree = fit_fms_tree(&records, &TreeLimits { max_depth, min_leaf, ..TreeLimits::default() })?;
    fs::create_dir_all(&ctx.out)?;
    let text = tree.export(ExportFormat::Text);
    fs::write(ctx.out.join("tree.txt"), &text)?;
    fs::write(ctx.out.join("tree.dot"), tree.export(ExportFormat::Dot))?;
    print!("{text}");
    Ok(())
}

fn cmd_synth(ctx: &Ctx, spec: SynthSpec) -> Result<()> {
    let data = generate(&spec)?;
    let cfg = write_dataset(&ctx.out, &data, spec.seed)?;
    println!("{}", cfg.display());
    Ok(())
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

fn cmd_run_grid(ctx: &Ctx) -> Result<()> {
    let inputs = Inputs::load(&ctx.cfg)?;
    let out = run_grid(&ctx.cfg, &inputs, ctx.jobs)?;
    write_grid_output(&ctx.out, &out)?;
    let failed = out.records.iter().filter(|r| r.error.is_some()).count();
    println!("{} cells written to {} ({failed} without a score)", out.records.len(), ctx.out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(&Ctx::new(cli, Some(a))?),
        Command::Augment { run, target } => cmd_augment(&Ctx::new(cli, Some(run))?, *target),
        Command::SelectFeatures(a) => cmd_select_features(&Ctx::new(cli, Some(a))?),
        Command::NetCompare { run, threshold, ridge } => cmd_net_compare(&Ctx::new(cli, Some(run))?, *threshold, *ridge),
        Command::Train(a) => cmd_train(&Ctx::new(cli, Some(a))?),
        Command::Evaluate { predictions } => cmd_evaluate(predictions),
        Command::Baseline { run, strategy, n, alpha_level } => {
            cmd_baseline(&Ctx::new(cli, Some(run))?, *strategy, *n, *alpha_level)
        }
        Command::Fms { input, max_depth, min_leaf } => cmd_fms(&Ctx::new(cli, None)?, input, *max_depth, *min_leaf),
        Command::Synth { n, p, n_signal, effect, imbalance } => {
            let ctx = Ctx::new(cli, None)?;
            let spec = SynthSpec { n: *n, p: *p, n_signal: *n_signal, effect: *effect, imbalance: *imbalance, seed: ctx.cfg.seed };
            cmd_synth(&ctx, spec)
        }
        Command::RunGrid(a) => cmd_run_grid(&Ctx::new(cli, Some(a))?),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

