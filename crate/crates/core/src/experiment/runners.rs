use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::manifest::{Manifest, MANIFEST_FILE};
use super::{derive_seed, ExperimentConfig, ExperimentKind, RunOptions, SourceSpec, VizVariant};
use crate::data::{
    load_cifar_binary, load_idx, sample_pair, synth2d, synth2d_split, synth_patterns, FactorSource,
    LabelSplit, PairDataset, Role, SplitScheme,
};
use crate::error::{Error, Result};
use crate::gradcheck::standard_suite;
use crate::metrics::{mean_std, spearman, Evaluator, MetricsRecord};
use crate::models::{Family, HeadMode, SplitModel, SplitModelSpec};
use crate::oracle::seen_label_check;
use crate::train::{train, RunHistory, StopReason};
use crate::viz::{
    blue_area_fraction, factor_panel, mark_points, rasterize, result_panel, write_ppm, Bounds, BLACK,
};
use crate::Tensor;

const STREAM_MODEL: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_TRAIN_DATA: u64 = 3;
const STREAM_TEST_DATA: u64 = 4;
const STREAM_EVAL: u64 = 5;

/// Final numbers of one (depth, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub depth: usize,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    pub train_acc: f64,
    pub final_loss: f64,
    pub metrics: MetricsRecord,
    pub history: RunHistory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
    /// Spearman correlation of depth against per-depth mean, per metric.
    pub trend: Vec<(String, Option<f64>)>,
}

impl SweepResult {
    /// Values of `metric` for successful cells at `depth`.
    pub fn values(&self, depth: usize, metric: fn(&MetricsRecord) -> f64) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.depth == depth)
            .filter_map(|c| c.outcome.as_ref().ok())
            .map(|m| metric(&m.metrics))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VizRow {
    pub case: String,
    pub variant: String,
    pub seed: u64,
    pub snapshot: &'static str,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub train_acc: f64,
    pub blue_fraction: f64,
    pub unseen_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPoint {
    pub variant: String,
    pub seed: u64,
    pub iteration: usize,
    pub ood_partitions: usize,
    pub ood_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewclassRow {
    pub variant: String,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub instance: usize,
    pub check: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunDetails {
    Sweep(SweepResult),
    Viz(Vec<VizRow>),
    Partition {
        points: Vec<PartitionPoint>,
        cells: Vec<CellResult>,
    },
    Newclass(Vec<NewclassRow>),
    Gradcheck(Vec<GradcheckRow>),
    TrainOnce(CellResult),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub failed_cells: usize,
    pub details: RunDetails,
}

/// Loaded sources for every factor.
struct Sources {
    train: Vec<FactorSource>,
    test: Vec<FactorSource>,
}

fn resolve(data_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        data_dir.join(p)
    }
}

fn load_sources(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Sources> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, spec) in cfg.data.sources.iter().enumerate() {
        let (a, b) = match spec {
            SourceSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => (
                load_idx(
                    &resolve(data_dir, train_images),
                    &resolve(data_dir, train_labels),
                    *classes,
                )?,
                load_idx(
                    &resolve(data_dir, test_images),
                    &resolve(data_dir, test_labels),
                    *classes,
                )?,
            ),
            SourceSpec::Cifar {
                train_files,
                test_files,
            } => {
                let load = |files: &[PathBuf]| {
                    let paths: Vec<PathBuf> = files.iter().map(|f| resolve(data_dir, f)).collect();
                    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
                    load_cifar_binary(&refs)
                };
                (load(train_files)?, load(test_files)?)
            }
            SourceSpec::Synthetic {
                style,
                classes,
                per_class,
                shape,
            } => {
                let base = derive_seed(cfg.data.source_seed, 100 + i as u64);
                let mut r_train = ChaCha8Rng::seed_from_u64(derive_seed(base, 0));
                let mut r_test = ChaCha8Rng::seed_from_u64(derive_seed(base, 1));
                (
                    synth_patterns(*style, *classes, *per_class, shape, &mut r_train)?,
                    synth_patterns(*style, *classes, *per_class, shape, &mut r_test)?,
                )
            }
        };
        let (a, b) = match &cfg.data.input_shape {
            Some(shape) => (a.conformed(shape)?, b.conformed(shape)?),
            None => (a, b),
        };
        train.push(a);
        test.push(b);
    }
    Ok(Sources { train, test })
}

fn source_checksums(sources: &Sources) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, (a, b)) in sources.train.iter().zip(&sources.test).enumerate() {
        out.push((format!("source.{i}.train"), a.checksum()));
        out.push((format!("source.{i}.test"), b.checksum()));
    }
    out
}

fn split_for(cfg: &ExperimentConfig, sources: &Sources) -> Result<LabelSplit> {
    let c1 = sources.train[0].classes();
    let c2 = sources.train.get(1).map_or(0, FactorSource::classes);
    LabelSplit::new(cfg.data.scheme, c1, c2)
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    sources: Sources,
    split: LabelSplit,
}

struct CellData {
    train: PairDataset,
    evaluator: Evaluator,
}

impl Context<'_> {
    fn sample(&self, role: Role, n: usize, seed: u64, stream: u64) -> Result<PairDataset> {
        let (a, b) = match role {
            Role::Train => (&self.sources.train[0], self.sources.train.get(1)),
            Role::Test => (&self.sources.test[0], self.sources.test.get(1)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
        sample_pair(&self.split, a, b, self.cfg.data.merge, role, n, &mut rng)
    }

    fn cell_data(&self, seed: u64) -> Result<CellData> {
        let train = self.sample(Role::Train, self.cfg.data.train_samples, seed, STREAM_TRAIN_DATA)?;
        let test = self.sample(Role::Test, self.cfg.data.eval_samples, seed, STREAM_TEST_DATA)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_EVAL));
        let evaluator = Evaluator::new(&test, self.cfg.data.eval_samples, &mut rng)?;
        Ok(CellData { train, evaluator })
    }

    fn model_spec(&self, depth: usize, input_shape: &[usize]) -> Result<SplitModelSpec> {
        let m = self.cfg.model()?;
        let classes_per_factor = match (m.head_mode, self.split.scheme) {
            (HeadMode::Binary, SplitScheme::NewClasses) => vec![1; self.split.classes[0]],
            _ => self.split.classes.clone(),
        };
        let mut spec = match m.family {
            Family::Cnn => SplitModelSpec::cnn(
                m.total_depth,
                depth,
                m.trunk_width,
                m.fc_width,
                classes_per_factor,
                input_shape.to_vec(),
            ),
            _ => SplitModelSpec::mlp(
                m.total_depth,
                depth,
                m.trunk_width,
                classes_per_factor,
                input_shape.to_vec(),
            ),
        };
        spec.family = m.family;
        spec.use_bias = m.use_bias;
        spec.head_mode = m.head_mode;
        spec.activation = m.activation;
        spec.kernel_size = m.kernel_size;
        Ok(spec)
    }

    /// Trains one cell. With `track`, every snapshot is scored.
    fn run_cell(&self, depth: usize, seed: u64, track: bool) -> Result<(CellMetrics, SplitModel)> {
        let data = self.cell_data(seed)?;
        let spec = self.model_spec(depth, data.train.input_shape())?;
        let mut model = SplitModel::build(&spec, derive_seed(seed, STREAM_MODEL))?;
        let mut tc = self.cfg.train_config()?.clone();
        tc.seed = derive_seed(seed, STREAM_ORDER);
        let history = train(&mut model, &data.train, &tc, |m, _| {
            if track {
                data.evaluator.evaluate(m).map(Some)
            } else {
                Ok(None)
            }
        })?;
        let metrics = match &history.last().metrics {
            Some(m) => m.clone(),
            None => data.evaluator.evaluate(&model)?,
        };
        Ok((
            CellMetrics {
                train_acc: history.final_train_acc(),
                final_loss: history.last().loss,
                metrics,
                history,
            },
            model,
        ))
    }
}

fn par_map<T, R, F>(threads: usize, items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| items.into_par_iter().map(f).collect()))
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn text(&mut self, rel: &str, body: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        self.files.push(p);
        Ok(())
    }
}

fn variant_name(depth: usize, total: usize) -> String {
    match depth {
        0 => "individual".into(),
        d if d == total => "shared".into(),
        d => format!("s{d}"),
    }
}

fn fmt_ms(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.6}±{s:.6}")
}

type Metric = (&'static str, fn(&MetricsRecord) -> f64);

const METRICS: [Metric; 4] = [
    ("test_sample_acc", |m| m.test_sample_acc),
    ("test_set_acc", |m| m.test_set_acc),
    ("random_set_acc", |m| m.random_set_acc),
    ("ood_partitions", |m| m.ood_partition_count as f64),
];

/// Loads sources, checks manifest checksums and writes the manifest.
fn prepare<'a>(cfg: &'a ExperimentConfig, opts: &RunOptions, w: &mut Writer) -> Result<Context<'a>> {
    cfg.validate()?;
    let sources = load_sources(cfg, &opts.data_dir)?;
    let sums = source_checksums(&sources);
    if let Some(expected) = &opts.expected_checksums {
        let got: BTreeMap<String, String> = sums.iter().cloned().collect();
        if &got != expected {
            return Err(Error::Config(
                "source checksums differ from the manifest; the data has changed".into(),
            ));
        }
    }
    let mut manifest = Manifest::for_config(cfg, &opts.origin);
    for (k, v) in &sums {
        manifest.push(k, v);
    }
    w.text(MANIFEST_FILE, &manifest.render())?;
    let split = if cfg.kind == ExperimentKind::Viz2d {
        synth2d_split()
    } else {
        split_for(cfg, &sources)?
    };
    Ok(Context { cfg, sources, split })
}

/// Runs `cfg` according to its kind.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    match cfg.kind {
        ExperimentKind::Sweep => run_sweep(cfg, opts),
        ExperimentKind::Viz2d => run_viz2d(cfg, opts),
        ExperimentKind::PartitionTrack => run_partition_track(cfg, opts),
        ExperimentKind::Newclass => run_newclass(cfg, opts),
        ExperimentKind::Gradcheck => run_gradcheck(cfg, opts),
        ExperimentKind::TrainOnce => run_train_once(cfg, opts),
    }
}

fn history_name(depth: usize, seed: u64) -> String {
    format!("histories/s{depth}_seed{seed}.csv")
}

/// Every (depth, seed) cell: one CSV row each, then mean ± std per depth
/// and the depth-trend correlation per metric.
pub fn run_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut w = Writer::new(&opts.out_dir)?;
    let ctx = prepare(cfg, opts, &mut w)?;
    let depths = cfg.resolved_depths()?;
    let jobs: Vec<(usize, u64)> = depths
        .iter()
        .flat_map(|&d| cfg.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let cells: Vec<CellResult> = par_map(opts.threads, jobs, |(depth, seed)| CellResult {
        depth,
        seed,
        outcome: ctx
            .run_cell(depth, seed, false)
            .map(|(m, _)| m)
            .map_err(|e| e.to_string()),
    })?;

    let mut csv = String::from(
        "row,depth,seed,status,train_acc,final_loss,test_sample_acc,test_set_acc,random_set_acc,ood_partitions,ood_ratio\n",
    );
    for c in &cells {
        match &c.outcome {
            Ok(m) => {
                let r = &m.metrics;
                let _ = writeln!(
                    csv,
                    "run,{},{},ok,{},{},{},{},{},{},{}",
                    c.depth,
                    c.seed,
                    m.train_acc,
                    m.final_loss,
                    r.test_sample_acc,
                    r.test_set_acc,
                    r.random_set_acc,
                    r.ood_partition_count,
                    r.ood_sample_ratio
                );
            }
            Err(e) => {
                let _ = writeln!(csv, "run,{},{},failed: {},,,,,,,", c.depth, c.seed, csv_safe(e));
            }
        }
    }
    let mut summary = String::from("depth,n");
    for (name, _) in METRICS {
        let _ = write!(summary, ",{name}_mean,{name}_std");
    }
    summary.push('\n');
    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut trend_depths = Vec::new();
    for &d in &depths {
        let ok: Vec<&CellMetrics> = cells
            .iter()
            .filter(|c| c.depth == d)
            .filter_map(|c| c.outcome.as_ref().ok())
            .collect();
        let train: Vec<f64> = ok.iter().map(|m| m.train_acc).collect();
        let loss: Vec<f64> = ok.iter().map(|m| m.final_loss).collect();
        let _ = write!(
            csv,
            "summary,{d},all,ok={},{},{},",
            ok.len(),
            fmt_ms(&train),
            fmt_ms(&loss)
        );
        let _ = write!(summary, "{d},{}", ok.len());
        let mut parts = Vec::new();
        for (name, f) in METRICS {
            let v: Vec<f64> = ok.iter().map(|m| f(&m.metrics)).collect();
            let (mean, std) = mean_std(&v);
            parts.push(fmt_ms(&v));
            let _ = write!(summary, ",{mean},{std}");
            if !ok.is_empty() {
                means.entry(name).or_default().push(mean);
            }
        }
        let ratio: Vec<f64> = ok.iter().map(|m| m.metrics.ood_sample_ratio).collect();
        parts.push(fmt_ms(&ratio));
        csv.push_str(&parts.join(","));
        csv.push('\n');
        summary.push('\n');
        if !ok.is_empty() {
            trend_depths.push(d as f64);
        }
    }
    let mut trend_csv = String::from("metric,spearman\n");
    let mut trend = Vec::new();
    for (name, _) in METRICS {
        let rho = means.get(name).and_then(|m| spearman(&trend_depths, m));
        let _ = writeln!(
            trend_csv,
            "{name},{}",
            rho.map_or_else(|| "NA".to_string(), |r| r.to_string())
        );
        trend.push((name.to_string(), rho));
    }
    w.text("results.csv", &csv)?;
    w.text("summary.csv", &summary)?;
    w.text("trend.csv", &trend_csv)?;
    for c in &cells {
        if let Ok(m) = &c.outcome {
            w.text(&history_name(c.depth, c.seed), &m.history.to_csv())?;
        }
    }
    let failed_cells = cells.iter().filter(|c| c.outcome.is_err()).count();
    Ok(RunReport {
        files: w.files,
        failed_cells,
        details: RunDetails::Sweep(SweepResult { cells, trend }),
    })
}

fn csv_safe(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

/// Shared and individual variants under identical seeds, scored at every
/// snapshot.
pub fn run_partition_track(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut w = Writer::new(&opts.out_dir)?;
    let ctx = prepare(cfg, opts, &mut w)?;
    let total = cfg.model()?.total_depth;
    let depths = cfg.resolved_depths()?;
    let jobs: Vec<(usize, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| depths.iter().map(move |&d| (d, s)))
        .collect();
    let cells: Vec<CellResult> = par_map(opts.threads, jobs, |(depth, seed)| CellResult {
        depth,
        seed,
        outcome: ctx
            .run_cell(depth, seed, true)
            .map(|(m, _)| m)
            .map_err(|e| e.to_string()),
    })?;
    let mut csv = String::from("variant,seed,iteration,ood_partitions,ood_ratio\n");
    let mut points = Vec::new();
    for c in &cells {
        let Ok(m) = &c.outcome else { continue };
        for s in &m.history.snapshots {
            let Some(r) = &s.metrics else { continue };
            let p = PartitionPoint {
                variant: variant_name(c.depth, total),
                seed: c.seed,
                iteration: s.iteration,
                ood_partitions: r.ood_partition_count,
                ood_ratio: r.ood_sample_ratio,
            };
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                p.variant, p.seed, p.iteration, p.ood_partitions, p.ood_ratio
            );
            points.push(p);
        }
    }
    w.text("partitions.csv", &csv)?;
    for c in &cells {
        if let Ok(m) = &c.outcome {
            w.text(&history_name(c.depth, c.seed), &m.history.to_csv())?;
        }
    }
    let failed_cells = cells.iter().filter(|c| c.outcome.is_err()).count();
    Ok(RunReport {
        files: w.files,
        failed_cells,
        details: RunDetails::Partition { points, cells },
    })
}

/// Single-factor new-class experiment with one binary head per class.
pub fn run_newclass(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut w = Writer::new(&opts.out_dir)?;
    let ctx = prepare(cfg, opts, &mut w)?;
    let total = cfg.model()?.total_depth;
    let depths = cfg.resolved_depths()?;
    let jobs: Vec<(usize, u64)> = depths
        .iter()
        .flat_map(|&d| cfg.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let rows: Vec<NewclassRow> = par_map(opts.threads, jobs, |(depth, seed)| NewclassRow {
        variant: variant_name(depth, total),
        seed,
        outcome: ctx
            .run_cell(depth, seed, false)
            .map(|(m, _)| m)
            .map_err(|e| e.to_string()),
    })?;
    let mut csv =
        String::from("row,variant,seed,status,train_acc,test_sample_acc,test_set_acc,random_set_acc\n");
    for r in &rows {
        match &r.outcome {
            Ok(m) => {
                let _ = writeln!(
                    csv,
                    "run,{},{},ok,{},{},{},{}",
                    r.variant,
                    r.seed,
                    m.train_acc,
                    m.metrics.test_sample_acc,
                    m.metrics.test_set_acc,
                    m.metrics.random_set_acc
                );
            }
            Err(e) => {
                let _ = writeln!(csv, "run,{},{},failed: {},,,,", r.variant, r.seed, csv_safe(e));
            }
        }
    }
    for &d in &depths {
        let name = variant_name(d, total);
        let ok: Vec<&CellMetrics> = rows
            .iter()
            .filter(|r| r.variant == name)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        let col = |f: fn(&CellMetrics) -> f64| fmt_ms(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
        let _ = writeln!(
            csv,
            "summary,{name},all,ok={},{},{},{},{}",
            ok.len(),
            col(|m| m.train_acc),
            col(|m| m.metrics.test_sample_acc),
            col(|m| m.metrics.test_set_acc),
            col(|m| m.metrics.random_set_acc)
        );
    }
    w.text("newclass.csv", &csv)?;
    let failed_cells = rows.iter().filter(|r| r.outcome.is_err()).count();
    Ok(RunReport {
        files: w.files,
        failed_cells,
        details: RunDetails::Newclass(rows),
    })
}

/// One model, first depth and first seed; writes its history, final
/// metrics and a checkpoint.
pub fn run_train_once(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut w = Writer::new(&opts.out_dir)?;
    let ctx = prepare(cfg, opts, &mut w)?;
    let depth = cfg.resolved_depths()?[0];
    let seed = cfg.seeds[0];
    let tracked = cfg.train_config()?.eval_every > 0;
    let outcome = ctx.run_cell(depth, seed, tracked);
    let mut failed_cells = 0;
    let outcome = match outcome {
        Ok((m, model)) => {
            w.text("history.csv", &m.history.to_csv())?;
            w.text(
                "metrics.csv",
                &format!("{}\n{}\n", MetricsRecord::CSV_HEADER, m.metrics.csv_row()),
            )?;
            let p = w.path("model.sgl")?;
            model.save(&p)?;
            w.files.push(p);
            Ok(m)
        }
        Err(e) => {
            failed_cells = 1;
            Err(e.to_string())
        }
    };
    Ok(RunReport {
        files: w.files,
        failed_cells,
        details: RunDetails::TrainOnce(CellResult {
            depth,
            seed,
            outcome,
        }),
    })
}

/// Finite-difference checks of every op and small composites.
pub fn run_gradcheck(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let mut w = Writer::new(&opts.out_dir)?;
    w.text(MANIFEST_FILE, &Manifest::for_config(cfg, &opts.origin).render())?;
    let g = cfg.gradcheck.clone().unwrap_or(super::GradcheckConfig {
        instances: 20,
        step: 1e-5,
        tolerance: 1e-4,
    });
    let base = cfg.seeds[0];
    let per_instance = par_map(opts.threads, (0..g.instances).collect(), |i| {
        standard_suite(derive_seed(base, 1000 + i as u64), g.step, g.tolerance).map(|r| (i, r))
    })?;
    let mut rows = Vec::new();
    let mut csv = String::from("instance,check,max_rel_error,coordinates,skipped,passed\n");
    for res in per_instance {
        let (i, reports) = res?;
        for (check, r) in reports {
            let row = GradcheckRow {
                instance: i,
                check,
                max_rel_error: r.max_rel_error,
                coordinates: r.coordinates_checked,
                skipped: r.coordinates_skipped,
                passed: r.passed(),
            };
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                row.instance,
                row.check,
                row.max_rel_error,
                row.coordinates,
                row.skipped,
                row.passed
            );
            rows.push(row);
        }
    }
    w.text("gradcheck.csv", &csv)?;
    Ok(RunReport {
        files: w.files,
        failed_cells: rows.iter().filter(|r| !r.passed).count(),
        details: RunDetails::Gradcheck(rows),
    })
}

fn viz_spec(v: &VizVariant) -> SplitModelSpec {
    let mut spec = SplitModelSpec::mlp2d(v.shared_depth);
    spec.total_depth = v.total_depth;
    spec.trunk_width = v.width;
    spec.activation = v.activation;
    spec
}

/// Trains each (case, variant, seed) on 2-D data and writes the output and
/// result panels with their blue-area fractions.
pub fn run_viz2d(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut w = Writer::new(&opts.out_dir)?;
    let ctx = prepare(cfg, opts, &mut w)?;
    let viz = cfg.viz.as_ref().expect("validated");
    let tc = cfg.train_config()?;
    let new_combo = vec![1, 1];
    let mut jobs = Vec::new();
    for (ci, &case) in viz.cases.iter().enumerate() {
        for v in &viz.variants {
            for &seed in &cfg.seeds {
                jobs.push((ci, case, v.clone(), seed));
            }
        }
    }
    type Panels = Vec<(String, crate::viz::ColorRaster)>;
    let results: Vec<Result<(Vec<VizRow>, Panels)>> =
        par_map(opts.threads, jobs, |(ci, case, v, seed)| -> Result<_> {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TRAIN_DATA + 16 * ci as u64));
            let data = synth2d(case, Role::Train, cfg.data.train_samples, &mut rng)?;
            let points = data.inputs().expect("non-empty").into_data();
            let bounds = Bounds::around(&points, viz.margin)?;
            let spec = viz_spec(&v);
            let mut model = SplitModel::build(&spec, derive_seed(seed, STREAM_MODEL))?;
            let mut tcfg = tc.clone();
            tcfg.seed = derive_seed(seed, STREAM_ORDER);
            let mut snapshots = Vec::new();
            if viz.one_step_cases.contains(&case) {
                let mut early = model.clone();
                let mut one = tcfg.clone();
                one.iterations = 1;
                one.plateau = None;
                let h = train(&mut early, &data, &one, |_, _| Ok(None))?;
                snapshots.push(("step1", early, h));
            }
            let h = train(&mut model, &data, &tcfg, |_, _| Ok(None))?;
            snapshots.push(("final", model, h));
            let y_train = ctx.split.combos(Role::Train);
            let mut rows = Vec::new();
            let mut panels = Vec::new();
            for (tag, m, h) in snapshots {
                let raster = rasterize(&m, bounds, viz.resolution, viz.resolution)?;
                let cells = Tensor::new(
                    vec![raster.cells.len(), 2],
                    (0..raster.height)
                        .flat_map(|r| (0..raster.width).map(move |c| (c, r)))
                        .flat_map(|(c, r)| {
                            let (x, y) = bounds.cell_center(c, r, raster.width, raster.height);
                            [x, y]
                        })
                        .collect(),
                )?;
                let unseen = seen_label_check(&m, &cells, y_train)?;
                rows.push(VizRow {
                    case: case.to_string(),
                    variant: v.name.clone(),
                    seed,
                    snapshot: tag,
                    iterations: h.iterations_run,
                    stop_reason: h.stop_reason,
                    train_acc: h.final_train_acc(),
                    blue_fraction: blue_area_fraction(&raster, &new_combo)?,
                    unseen_fraction: unseen as f64 / raster.cells.len() as f64,
                });
                let suffix = if tag == "final" { String::new() } else { format!("_{tag}") };
                let base = format!("{}/seed{seed}/{case}{suffix}", v.name);
                for (name, mut panel) in [
                    ("out1", factor_panel(&raster, 0)?),
                    ("out2", factor_panel(&raster, 1)?),
                    ("result", result_panel(&raster, &new_combo)?),
                ] {
                    mark_points(&mut panel, &bounds, &points, BLACK);
                    panels.push((format!("{base}_{name}.ppm"), panel));
                }
            }
            Ok((rows, panels))
        })?;
    let mut all = Vec::new();
    let mut csv = String::from(
        "case,variant,seed,snapshot,iterations,stop_reason,train_acc,blue_fraction,unseen_fraction\n",
    );
    for r in results {
        let (rows, panels) = r?;
        for (rel, panel) in panels {
            let p = w.path(&rel)?;
            write_ppm(&panel, &p)?;
            w.files.push(p);
        }
        for row in rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                row.case,
                row.variant,
                row.seed,
                row.snapshot,
                row.iterations,
                serde_json::to_string(&row.stop_reason).expect("enum").replace('"', ""),
                row.train_acc,
                row.blue_fraction,
                row.unseen_fraction
            );
            all.push(row);
        }
    }
    w.text("fractions.csv", &csv)?;
    Ok(RunReport {
        files: w.files,
        failed_cells: 0,
        details: RunDetails::Viz(all),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names() {
        assert_eq!(variant_name(0, 7), "individual");
        assert_eq!(variant_name(7, 7), "shared");
        assert_eq!(variant_name(3, 7), "s3");
    }

    #[test]
    fn mean_std_formatting() {
        assert_eq!(fmt_ms(&[0.5, 0.7]), "0.600000±0.100000");
    }
}
