//! Expected calibration error and the correlation scores used to judge
//! whether uncertainty tracks mutilation severity.

use crate::error::{Error, Result};
use crate::uncertainty::{Measure, PredictiveSample, UncertaintyRecord};

pub const DEFAULT_BINS: usize = 15;

/// One scored test input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub predicted: usize,
    pub label: usize,
    pub level: f64,
    pub uncertainty: UncertaintyRecord,
}

impl PredictionRecord {
    /// Confidence and prediction come from the model-averaged distribution.
    pub fn from_sample(s: &PredictiveSample, label: usize, level: f64) -> Self {
        let mean = s.mean();
        let (predicted, confidence) = argmax(&mean);
        Self {
            confidence,
            predicted,
            label,
            level,
            uncertainty: UncertaintyRecord::from_sample(s),
        }
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinSummary {
    pub index: usize,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

impl BinSummary {
    pub fn lower(&self, bins: usize) -> f64 {
        self.index as f64 / bins as f64
    }

    pub fn upper(&self, bins: usize) -> f64 {
        (self.index + 1) as f64 / bins as f64
    }
}

/// Bin `m` covers confidences in `(m / M, (m + 1) / M]`; zero lands in bin 0.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let raw = (confidence * bins as f64).ceil() as isize - 1;
    raw.clamp(0, bins as isize - 1) as usize
}

/// ECE over `(confidence, correct)` pairs with `bins` equal-width bins.
/// Empty bins are reported with zero count and contribute nothing.
pub fn ece_pairs(pairs: &[(f64, bool)], bins: usize) -> Result<(f64, Vec<BinSummary>)> {
    if pairs.is_empty() {
        return Err(Error::Argument("ECE of an empty record set".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for &(c, ok) in pairs {
        let m = bin_index(c, bins);
        count[m] += 1;
        hits[m] += usize::from(ok);
        conf[m] += c;
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    let summaries = (0..bins)
        .map(|m| {
            let (accuracy, confidence) = if count[m] == 0 {
                (0.0, 0.0)
            } else {
                let c = count[m] as f64;
                (hits[m] as f64 / c, conf[m] / c)
            };
            total += count[m] as f64 / n * (accuracy - confidence).abs();
            BinSummary { index: m, count: count[m], accuracy, confidence }
        })
        .collect();
    Ok((total, summaries))
}

pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<(f64, Vec<BinSummary>)> {
    let pairs: Vec<(f64, bool)> = records.iter().map(|r| (r.confidence, r.correct())).collect();
    ece_pairs(&pairs, bins)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument(format!(
            "correlation needs two equal series of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("first series is constant"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("second series is constant"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Argument("cosine similarity needs equal non-empty vectors".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Argument("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Means over the test subset at one mutilation level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelAggregate {
    pub level: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub uncertainty: UncertaintyRecord,
}

/// Signed Pearson `r`; the reported score is its magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
}

impl Correlation {
    pub fn score(&self) -> f64 {
        self.r.abs()
    }
}

#[derive(Debug)]
pub struct CalibrationScores {
    /// Per measure, correlation between the level means of the measure and accuracy.
    pub uncertainty_vs_accuracy: Vec<(Measure, Result<Correlation>)>,
    /// Per measure, correlation between level ECE and the level means of the measure.
    pub ece_vs_uncertainty: Vec<(Measure, Result<Correlation>)>,
    /// ECE at the clean level, in percent.
    pub model_ece_percent: f64,
}

impl CalibrationScores {
    pub fn accuracy_score(&self, m: Measure) -> Option<&Result<Correlation>> {
        self.uncertainty_vs_accuracy.iter().find(|(k, _)| *k == m).map(|(_, r)| r)
    }

    pub fn ece_score(&self, m: Measure) -> Option<&Result<Correlation>> {
        self.ece_vs_uncertainty.iter().find(|(k, _)| *k == m).map(|(_, r)| r)
    }
}

/// Correlations across mutilation levels plus the clean-data ECE. Level 0
/// is the entry with the smallest level value.
pub fn calibration_report(levels: &[LevelAggregate]) -> Result<CalibrationScores> {
    if levels.len() < 2 {
        return Err(Error::Argument("calibration report needs at least two levels".into()));
    }
    let clean = levels
        .iter()
        .min_by(|a, b| a.level.total_cmp(&b.level))
        .expect("non-empty");
    let acc: Vec<f64> = levels.iter().map(|l| l.accuracy).collect();
    let eces: Vec<f64> = levels.iter().map(|l| l.ece).collect();
    let series = |m: Measure| -> Vec<f64> { levels.iter().map(|l| l.uncertainty.get(m)).collect() };
    Ok(CalibrationScores {
        uncertainty_vs_accuracy: Measure::ALL
            .into_iter()
            .map(|m| (m, pearson(&series(m), &acc).map(|r| Correlation { r })))
            .collect(),
        ece_vs_uncertainty: Measure::ALL
            .into_iter()
            .map(|m| (m, pearson(&eces, &series(m)).map(|r| Correlation { r })))
            .collect(),
        model_ece_percent: clean.ece * 100.0,
    })
}
