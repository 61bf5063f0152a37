//! The end-to-end pipeline behind the command-line tool: train, sweep a
//! mutilation grid, report, compare weight distributions and check samplers
//! against toy posteriors.

mod checkpoint;
mod config;
mod csv;
mod svg;
mod toy;

pub use checkpoint::{decode, encode, load as load_checkpoint, save as save_checkpoint};
pub use config::ExperimentConfig;
pub use csv::{format_reliability, format_sweep, parse_sweep, read_sweep, SweepRow, SWEEP_HEADER};
pub use svg::{line_chart, Series};
pub use toy::{cmd_toy, sample_moments, ToyFamily, ToyReport, ToyRun, MODE_SHARE, MOMENT_TOLERANCE};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::calibration::{calibration_report, ece, LevelAggregate, PredictionRecord, DEFAULT_BINS};
use crate::data::{find_mnist, load_mnist, mutilate, Dataset, MutilationKind, Split};
use crate::error::{Error, Result};
use crate::estimators::{draw_predictive, train, EstimatorKind, Fit, Posterior};
use crate::model::ModelSpec;
use crate::rng::derive_seed;
use crate::uncertainty::{Measure, UncertaintyRecord};

use csv::write_text;

/// Seed streams under the experiment seed.
const RETRAIN_STREAM: u64 = 0x100;
const NOISE_STREAM: u64 = 0x200;
const DRAW_STREAM: u64 = 0x300;

/// Process exit status for an error: 1 usage or configuration, 2 data or
/// ingestion, 3 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) | Error::Range { .. } | Error::Oracle(_) => 1,
        Error::Divergence { .. } | Error::MemberDiverged { .. } | Error::UndefinedCorrelation(_) => 3,
        Error::Tensor(_)
        | Error::Layout { .. }
        | Error::Label { .. }
        | Error::Ingestion { .. }
        | Error::Data(_)
        | Error::Checkpoint(_)
        | Error::Io { .. } => 2,
    }
}

/// Loads the MNIST split from the configured directory, truncated to the
/// configured subset size.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let (images, labels) = find_mnist(&cfg.data_dir, split)?;
    let ds = load_mnist(&images, &labels)?;
    let subset = match split {
        Split::Train => cfg.train_subset,
        Split::Test => cfg.test_subset,
    };
    Ok(subset.map_or(ds.clone(), |n| ds.head(n)))
}

/// The configured network for samples shaped like `ds`.
pub fn model_for(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ModelSpec> {
    let (c, h, w) = ds
        .image_dims()
        .unwrap_or((1, 1, ds.sample_len()));
    let spec = cfg.model_spec(c, h, w, ds.classes);
    spec.validate()?;
    Ok(spec)
}

/// Runs the configured estimator on `data` with an explicit seed.
pub fn fit(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<Fit> {
    cfg.validate()?;
    let spec = model_for(cfg, data)?;
    let sampler = crate::estimators::SamplerConfig { seed, ..cfg.sampler() };
    train(cfg.estimator, &spec, data, cfg.prior()?, &sampler, &cfg.schedule(), cfg.members)
}

pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join(format!("{}.ckpt", cfg.estimator))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub iterations: usize,
    pub final_loss: f64,
    pub samples: usize,
    pub wall: Duration,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = load_split(cfg, Split::Train)?;
    let start = Instant::now();
    let fitted = fit(cfg, &data, cfg.seed)?;
    let wall = start.elapsed();
    let path = checkpoint_path(cfg);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    save_checkpoint(&path, &fitted.posterior)?;
    Ok(TrainOutcome {
        checkpoint: path,
        iterations: cfg.iterations,
        final_loss: fitted.final_loss,
        samples: fitted.posterior.vectors().len(),
        wall,
    })
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub reliability: PathBuf,
}

fn sweep_stem(estimator: EstimatorKind, kind: MutilationKind) -> String {
    format!("sweep_{estimator}_{kind}")
}

/// Scores one mutilation level: accuracy, ECE and mean uncertainty over
/// the test set, plus the ECE bins.
pub fn evaluate_level(
    posterior: &Posterior,
    data: &Dataset,
    draws: usize,
    seed: u64,
    level_value: f64,
) -> Result<(LevelAggregate, Vec<crate::calibration::BinSummary>)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.gather(&idx);
    let preds = draw_predictive(posterior, &x, draws, seed)?;
    let records: Vec<PredictionRecord> = preds
        .iter()
        .zip(&y)
        .map(|(p, &label)| PredictionRecord::from_sample(p, label, level_value))
        .collect();
    let accuracy = records.iter().filter(|r| r.correct()).count() as f64 / records.len().max(1) as f64;
    let (e, bins) = ece(&records, DEFAULT_BINS)?;
    let unc: Vec<UncertaintyRecord> = records.iter().map(|r| r.uncertainty).collect();
    Ok((
        LevelAggregate {
            level: level_value,
            accuracy,
            ece: e,
            uncertainty: UncertaintyRecord::mean_of(&unc),
        },
        bins,
    ))
}

fn check_spec(posterior: &Posterior, expected: &ModelSpec) -> Result<()> {
    if posterior.spec() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds model `{}`, configuration describes `{}`",
            posterior.spec().descriptor(),
            expected.descriptor()
        )));
    }
    Ok(())
}

/// Mutilates the test subset level by level for every repetition, scoring
/// each level. Without `retrain_per_rep` the checkpoint is reused and each
/// repetition redraws mutilation noise and predictive samples.
pub fn cmd_sweep(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<SweepOutcome> {
    cfg.validate()?;
    let test = load_split(cfg, Split::Test)?;
    let expected = model_for(cfg, &test)?;
    let shared = if cfg.retrain_per_rep {
        None
    } else {
        let path = checkpoint.map_or_else(|| checkpoint_path(cfg), Path::to_path_buf);
        let posterior = load_checkpoint(&path)?;
        check_spec(&posterior, &expected)?;
        if posterior.estimator() != cfg.estimator {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written by {}, configuration asks for {}",
                posterior.estimator(),
                cfg.estimator
            )));
        }
        Some(posterior)
    };
    let train_data = if cfg.retrain_per_rep { Some(load_split(cfg, Split::Train)?) } else { None };

    let mspec_levels = cfg.mutilation_spec(0).levels();
    let mut rows = Vec::new();
    let mut reliability = String::new();
    for rep in 0..cfg.repetitions {
        let owned;
        let posterior = match (&shared, &train_data) {
            (Some(p), _) => p,
            (None, Some(data)) => {
                owned = fit(cfg, data, derive_seed(cfg.seed, RETRAIN_STREAM + rep as u64))?.posterior;
                &owned
            }
            (None, None) => unreachable!("either a checkpoint or training data is loaded"),
        };
        let draws = posterior.available().map_or(cfg.draws, |n| n.min(cfg.draws));
        let mspec = cfg.mutilation_spec(derive_seed(cfg.seed, NOISE_STREAM + rep as u64));
        let draw_seed = derive_seed(cfg.seed, DRAW_STREAM + rep as u64);
        for (level, &value) in mspec_levels.iter().enumerate() {
            let data = mutilate(&test, &mspec, level)?;
            let (agg, bins) = evaluate_level(posterior, &data, draws, derive_seed(draw_seed, level as u64), value)?;
            if rep == 0 && level == 0 {
                reliability = format_reliability(&bins);
            }
            rows.push(SweepRow {
                estimator: cfg.estimator,
                repetition: rep,
                kind: cfg.mutilation,
                level: value,
                accuracy: agg.accuracy,
                uncertainty: agg.uncertainty,
                ece: agg.ece,
            });
        }
    }

    let stem = sweep_stem(cfg.estimator, cfg.mutilation);
    let csv = cfg.out_dir.join(format!("{stem}.csv"));
    write_text(&csv, &format_sweep(&rows))?;
    let rel = cfg.out_dir.join(format!("reliability_{}.csv", cfg.estimator));
    write_text(&rel, &reliability)?;
    let mut plots = Vec::new();
    let by_est = group(&rows);
    for (name, path) in plot_measures(&by_est, cfg.mutilation, &cfg.out_dir, &stem)? {
        let _ = name;
        plots.push(path);
    }
    Ok(SweepOutcome { rows, csv, plots, reliability: rel })
}

type Grouped = BTreeMap<EstimatorKind, BTreeMap<usize, Vec<SweepRow>>>;

fn group(rows: &[SweepRow]) -> Grouped {
    let mut g: Grouped = BTreeMap::new();
    for r in rows {
        g.entry(r.estimator).or_default().entry(r.repetition).or_default().push(*r);
    }
    for reps in g.values_mut() {
        for rs in reps.values_mut() {
            rs.sort_by(|a, b| a.level.total_cmp(&b.level));
        }
    }
    g
}

/// Level-wise means over repetitions.
fn level_means(reps: &BTreeMap<usize, Vec<SweepRow>>, value: impl Fn(&SweepRow) -> f64) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for rows in reps.values() {
        for r in rows {
            let e = acc.entry(r.level.to_bits()).or_insert((r.level, 0.0, 0));
            e.1 += value(r);
            e.2 += 1;
        }
    }
    let mut pts: Vec<(f64, f64)> = acc.into_values().map(|(l, s, n)| (l, s / n as f64)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

fn plot_measures(
    grouped: &Grouped,
    kind: MutilationKind,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<(String, PathBuf)>> {
    let x_label = match kind {
        MutilationKind::Noise => "noise level",
        MutilationKind::Rotation => "rotation (degrees)",
    };
    let mut metrics: Vec<(String, Box<dyn Fn(&SweepRow) -> f64>)> = Measure::ALL
        .into_iter()
        .map(|m| (m.name().to_string(), Box::new(move |r: &SweepRow| r.uncertainty.get(m)) as Box<dyn Fn(&SweepRow) -> f64>))
        .collect();
    metrics.push(("accuracy".into(), Box::new(|r: &SweepRow| r.accuracy)));
    metrics.push(("ece".into(), Box::new(|r: &SweepRow| r.ece)));
    let mut out = Vec::new();
    for (name, f) in &metrics {
        let series: Vec<Series> = grouped
            .iter()
            .map(|(est, reps)| Series { name: est.tag(), points: level_means(reps, f) })
            .collect();
        let svg = line_chart(&format!("{name} under {kind}"), x_label, name, &series);
        let path = out_dir.join(format!("{stem}_{name}.svg"));
        write_text(&path, &svg)?;
        out.push((name.clone(), path));
    }
    Ok(out)
}

/// Mean and sample standard deviation (n - 1; zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Per-estimator summary across repetitions. Scores that were undefined
/// in every repetition are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub repetitions: usize,
    /// `|r|` between each measure and accuracy across levels.
    pub uncertainty_vs_accuracy: Vec<(Measure, Option<MeanStd>)>,
    /// Mean signed `r` of the accuracy correlations, kept for the sign.
    pub accuracy_r: Vec<(Measure, Option<MeanStd>)>,
    /// Signed `r` between ECE and predictive entropy across levels.
    pub ece_vs_entropy: Option<MeanStd>,
    /// Clean-level ECE in percent.
    pub model_ece_percent: MeanStd,
}

impl EstimatorSummary {
    pub fn accuracy_score(&self, m: Measure) -> Option<MeanStd> {
        self.uncertainty_vs_accuracy.iter().find(|(k, _)| *k == m).and_then(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summaries: Vec<EstimatorSummary>,
    pub table: String,
    pub csv: String,
}

/// Builds the report from sweep rows of one or more estimators.
pub fn summarise(rows: &[SweepRow]) -> Result<Report> {
    let grouped = group(rows);
    let mut summaries = Vec::new();
    for (&estimator, reps) in &grouped {
        let mut abs: BTreeMap<Measure, Vec<f64>> = BTreeMap::new();
        let mut signed: BTreeMap<Measure, Vec<f64>> = BTreeMap::new();
        let mut ece_r = Vec::new();
        let mut clean = Vec::new();
        for (rep, rows) in reps {
            if !rows.iter().any(|r| r.level == 0.0) {
                return Err(Error::Data(format!("{estimator} repetition {rep} has no level 0 row")));
            }
            let levels: Vec<LevelAggregate> = rows
                .iter()
                .map(|r| LevelAggregate { level: r.level, accuracy: r.accuracy, ece: r.ece, uncertainty: r.uncertainty })
                .collect();
            let scores = calibration_report(&levels)?;
            for (m, c) in &scores.uncertainty_vs_accuracy {
                if let Ok(c) = c {
                    abs.entry(*m).or_default().push(c.score());
                    signed.entry(*m).or_default().push(c.r);
                }
            }
            if let Some(Ok(c)) = scores.ece_score(Measure::Entropy) {
                ece_r.push(c.r);
            }
            clean.push(scores.model_ece_percent);
        }
        let collect = |map: &BTreeMap<Measure, Vec<f64>>| -> Vec<(Measure, Option<MeanStd>)> {
            Measure::ALL
                .into_iter()
                .map(|m| (m, map.get(&m).and_then(|v| MeanStd::of(v))))
                .collect()
        };
        summaries.push(EstimatorSummary {
            estimator,
            repetitions: reps.len(),
            uncertainty_vs_accuracy: collect(&abs),
            accuracy_r: collect(&signed),
            ece_vs_entropy: MeanStd::of(&ece_r),
            model_ece_percent: MeanStd::of(&clean).expect("at least one repetition"),
        });
    }
    if summaries.is_empty() {
        return Err(Error::Data("no sweep rows to report".into()));
    }
    let (table, csv) = render_report(&summaries);
    Ok(Report { summaries, table, csv })
}

fn cell(v: Option<MeanStd>) -> String {
    v.map_or_else(|| "n/a".to_string(), |m| m.to_string())
}

fn render_report(summaries: &[EstimatorSummary]) -> (String, String) {
    const LABEL: usize = 34;
    const COL: usize = 14;
    let mut rows: Vec<(String, Vec<Option<MeanStd>>)> = vec![("1.Uncertainty vs Acc Corr".into(), Vec::new())];
    for m in Measure::ALL {
        rows.push((
            format!("  {}", m.name()),
            summaries.iter().map(|s| s.accuracy_score(m)).collect(),
        ));
    }
    rows.push(("2.ECE vs Uncertainty Corr".into(), summaries.iter().map(|s| s.ece_vs_entropy).collect()));
    rows.push((
        "3.Model ECE (%)".into(),
        summaries.iter().map(|s| Some(s.model_ece_percent)).collect(),
    ));

    let mut table = format!("{:<LABEL$}", "");
    for s in summaries {
        write!(table, "{:>COL$}", s.estimator.tag()).expect("write to string");
    }
    table.push('\n');
    for (label, cells) in &rows {
        write!(table, "{label:<LABEL$}").expect("write to string");
        for c in cells {
            write!(table, "{:>COL$}", cell(*c)).expect("write to string");
        }
        table.push('\n');
    }

    let mut csv = String::from("row,estimator,mean,std,repetitions\n");
    for (label, cells) in rows.iter().filter(|(_, c)| !c.is_empty()) {
        for (s, c) in summaries.iter().zip(cells) {
            let (mean, std) = c.map_or((String::new(), String::new()), |m| (m.mean.to_string(), m.std.to_string()));
            writeln!(csv, "{},{},{mean},{std},{}", label.trim(), s.estimator, s.repetitions).expect("write to string");
        }
    }
    (table, csv)
}

/// Reads sweep CSVs, writes `report.txt`, `report.csv` and overlay plots
/// into `out_dir`, and returns the report.
pub fn cmd_report(inputs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    if inputs.is_empty() {
        return Err(Error::Argument("report needs at least one sweep CSV".into()));
    }
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(read_sweep(p)?);
    }
    let report = summarise(&rows)?;
    write_text(&out_dir.join("report.txt"), &report.table)?;
    write_text(&out_dir.join("report.csv"), &report.csv)?;
    let kinds: Vec<MutilationKind> = {
        let mut k: Vec<MutilationKind> = rows.iter().map(|r| r.kind).collect();
        k.dedup();
        k
    };
    for kind in kinds {
        let subset: Vec<SweepRow> = rows.iter().filter(|r| r.kind == kind).copied().collect();
        plot_measures(&group(&subset), kind, out_dir, &format!("report_{kind}"))?;
    }
    Ok(report)
}

pub const DEFAULT_HIST_BINS: usize = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightHistogram {
    /// `bins + 1` edges over the pooled range of every input.
    pub edges: Vec<f64>,
    /// Per input label, counts per bin.
    pub counts: Vec<(String, Vec<usize>)>,
    /// Per input label, standard deviation of the pooled weights.
    pub std: Vec<(String, f64)>,
    /// Every weight had the same value, so only one bin is populated.
    pub degenerate: bool,
}

/// Pools the weights of each `(label, posterior)` and bins them on a shared grid.
pub fn weight_histogram(inputs: &[(String, Posterior)], bins: usize) -> Result<WeightHistogram> {
    if inputs.is_empty() || bins == 0 {
        return Err(Error::Argument("weight histogram needs inputs and at least one bin".into()));
    }
    let pooled: Vec<(String, Vec<f64>)> = inputs
        .iter()
        .map(|(l, p)| (l.clone(), p.weight_vectors().concat()))
        .collect();
    let (lo, hi) = pooled
        .iter()
        .flat_map(|(_, w)| w.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = !(hi > lo);
    let width = if degenerate { 1.0 } else { (hi - lo) / bins as f64 };
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = Vec::new();
    let mut std = Vec::new();
    for (label, w) in &pooled {
        let mut c = vec![0usize; bins];
        for &v in w {
            let i = if degenerate { 0 } else { (((v - lo) / width) as usize).min(bins - 1) };
            c[i] += 1;
        }
        counts.push((label.clone(), c));
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        std.push((label.clone(), (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()));
    }
    Ok(WeightHistogram { edges, counts, std, degenerate })
}

impl WeightHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper");
        for (l, _) in &self.counts {
            write!(out, ",{l}").expect("write to string");
        }
        out.push('\n');
        for b in 0..self.edges.len() - 1 {
            write!(out, "{},{}", self.edges[b], self.edges[b + 1]).expect("write to string");
            for (_, c) in &self.counts {
                write!(out, ",{}", c[b]).expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let series: Vec<Series> = self
            .counts
            .iter()
            .map(|(l, c)| {
                let total = c.iter().sum::<usize>().max(1) as f64;
                Series {
                    name: l,
                    points: c
                        .iter()
                        .enumerate()
                        .map(|(i, &n)| (0.5 * (self.edges[i] + self.edges[i + 1]), n as f64 / total))
                        .collect(),
                }
            })
            .collect();
        line_chart("weight distribution", "weight value", "fraction of weights", &series)
    }
}

/// Histograms the checkpoints and writes `weights.csv` and `weights.svg`.
/// Inputs written by the same estimator are pooled under one label.
pub fn cmd_weight_hist(checkpoints: &[PathBuf], bins: usize, out_dir: &Path) -> Result<WeightHistogram> {
    let mut pooled: Vec<(String, Posterior)> = Vec::new();
    let mut extra: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for path in checkpoints {
        let p = load_checkpoint(path)?;
        let label = p.estimator().tag().to_string();
        if pooled.iter().any(|(l, _)| *l == label) {
            extra.entry(label).or_default().extend(p.weight_vectors().into_iter().map(<[f64]>::to_vec));
        } else {
            pooled.push((label, p));
        }
    }
    let mut hist = weight_histogram(&pooled, bins)?;
    if !extra.is_empty() {
        // re-pool with the additional checkpoints folded in
        let merged: Vec<(String, Posterior)> = pooled
            .into_iter()
            .map(|(l, p)| {
                let Some(more) = extra.get(&l) else { return (l, p) };
                let spec = p.spec().clone();
                let mut samples: Vec<crate::model::ParameterVector> = p
                    .weight_vectors()
                    .into_iter()
                    .map(|v| crate::model::ParameterVector(v.to_vec()))
                    .collect();
                samples.extend(more.iter().cloned().map(crate::model::ParameterVector));
                let meta = (0..samples.len())
                    .map(|i| crate::estimators::SampleMeta { iteration: i, step_size: 0.0 })
                    .collect();
                let set = crate::estimators::PosteriorSampleSet { spec, estimator: p.estimator(), samples, meta };
                (l, Posterior::Samples(set))
            })
            .collect();
        hist = weight_histogram(&merged, bins)?;
    }
    write_text(&out_dir.join("weights.csv"), &hist.to_csv())?;
    write_text(&out_dir.join("weights.svg"), &hist.to_svg())?;
    Ok(hist)
}
