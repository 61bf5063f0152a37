//! Predictive entropy, mutual information and the aleatoric/epistemic
//! split of the predictive covariance, all from a stack of softmax rows.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;
const MI_CLAMP: f64 = 1e-10;

/// `T x K` class probabilities for one input, one row per posterior sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSample {
    probs: Vec<f64>,
    samples: usize,
    classes: usize,
}

impl PredictiveSample {
    pub fn new(samples: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if samples == 0 || classes < 2 || probs.len() != samples * classes {
            return Err(Error::Argument(format!(
                "{} probabilities cannot form {samples} rows of {classes} classes",
                probs.len()
            )));
        }
        for (t, row) in probs.chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Argument(format!("row {t} is not a distribution (sum {sum})")));
            }
        }
        Ok(Self { probs, samples, classes })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Argument("ragged predictive rows".into()));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.classes..(t + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.classes)
    }

    /// The model-averaged prediction.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.classes];
        for row in self.rows() {
            for (a, p) in m.iter_mut().zip(row) {
                *a += p;
            }
        }
        let t = self.samples as f64;
        m.iter_mut().for_each(|a| *a /= t);
        m
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn predictive_entropy(s: &PredictiveSample) -> f64 {
    entropy(&s.mean())
}

/// Predictive entropy minus the mean per-sample entropy. Rounding noise
/// just below zero is clamped.
pub fn mutual_information(s: &PredictiveSample) -> f64 {
    let expected = s.rows().map(entropy).sum::<f64>() / s.samples as f64;
    let mi = predictive_entropy(s) - expected;
    if mi < 0.0 && mi > -MI_CLAMP {
        0.0
    } else {
        mi
    }
}

/// Dense symmetric `K x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatrix {
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ClassMatrix {
    fn zeros(classes: usize) -> Self {
        Self { classes, data: vec![0.0; classes * classes] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.classes + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }
}

/// Mean over samples of `diag(p_t) - p_t p_t^T`.
pub fn aleatoric(s: &PredictiveSample) -> ClassMatrix {
    let k = s.classes;
    let mut m = ClassMatrix::zeros(k);
    for row in s.rows() {
        for i in 0..k {
            m.data[i * k + i] += row[i];
            for j in 0..k {
                m.data[i * k + j] -= row[i] * row[j];
            }
        }
    }
    let t = s.samples as f64;
    m.data.iter_mut().for_each(|v| *v /= t);
    m
}

/// Covariance of the sample rows about their mean, normalised by `T`.
pub fn epistemic(s: &PredictiveSample) -> ClassMatrix {
    let k = s.classes;
    let mean = s.mean();
    let mut m = ClassMatrix::zeros(k);
    for row in s.rows() {
        for i in 0..k {
            let di = row[i] - mean[i];
            for j in 0..k {
                m.data[i * k + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let t = s.samples as f64;
    m.data.iter_mut().for_each(|v| *v /= t);
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Measure {
    Entropy,
    MutualInformation,
    Aleatoric,
    Epistemic,
}

impl Measure {
    pub const ALL: [Measure; 4] = [
        Measure::Entropy,
        Measure::MutualInformation,
        Measure::Aleatoric,
        Measure::Epistemic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Entropy => "entropy",
            Measure::MutualInformation => "mutual_information",
            Measure::Aleatoric => "aleatoric",
            Measure::Epistemic => "epistemic",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown measure `{s}`")))
    }
}

/// The four scalar measures for one input. The matrix measures are reduced
/// to their traces.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UncertaintyRecord {
    pub entropy: f64,
    pub mutual_information: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

impl UncertaintyRecord {
    pub fn from_sample(s: &PredictiveSample) -> Self {
        let mean = s.mean();
        let t = s.samples as f64;
        let (mut alea, mut epi) = (0.0, 0.0);
        for row in s.rows() {
            alea += 1.0 - row.iter().map(|p| p * p).sum::<f64>();
            epi += row.iter().zip(&mean).map(|(p, m)| (p - m).powi(2)).sum::<f64>();
        }
        Self {
            entropy: entropy(&mean),
            mutual_information: mutual_information(s),
            aleatoric: alea / t,
            epistemic: epi / t,
        }
    }

    pub fn get(&self, m: Measure) -> f64 {
        match m {
            Measure::Entropy => self.entropy,
            Measure::MutualInformation => self.mutual_information,
            Measure::Aleatoric => self.aleatoric,
            Measure::Epistemic => self.epistemic,
        }
    }

    /// Componentwise mean of several records.
    pub fn mean_of(records: &[UncertaintyRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mut out = Self::default();
        for r in records {
            out.entropy += r.entropy / n;
            out.mutual_information += r.mutual_information / n;
            out.aleatoric += r.aleatoric / n;
            out.epistemic += r.epistemic / n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(rows: &[&[f64]]) -> PredictiveSample {
        PredictiveSample::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn entropy_values() {
        let uniform = vec![0.1; 10];
        assert!((entropy(&uniform) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mutual_information_of_disagreeing_pair() {
        let s = sample(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((predictive_entropy(&s) - 2f64.ln()).abs() < 1e-15);
        assert!((mutual_information(&s) - 2f64.ln()).abs() < 1e-15);
        let same = sample(&[&[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(mutual_information(&same), 0.0);
    }

    #[test]
    fn hand_computed_matrices() {
        let a = aleatoric(&sample(&[&[0.5, 0.5]]));
        assert_eq!(a.data, vec![0.25, -0.25, -0.25, 0.25]);
        assert_eq!(a.trace(), 0.5);
        let e = epistemic(&sample(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(e.data, vec![0.25, -0.25, -0.25, 0.25]);
        assert_eq!(aleatoric(&sample(&[&[0.0, 1.0], &[1.0, 0.0]])).data, vec![0.0; 4]);
        assert_eq!(epistemic(&sample(&[&[0.2, 0.8]])).data, vec![0.0; 4]);
    }

    #[test]
    fn rejects_non_distributions() {
        assert!(PredictiveSample::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(PredictiveSample::new(1, 2, vec![-0.1, 1.1]).is_err());
        assert!(PredictiveSample::new(2, 2, vec![0.5, 0.5]).is_err());
    }

    fn arb_sample() -> impl Strategy<Value = PredictiveSample> {
        (1usize..8, 2usize..7).prop_flat_map(|(t, k)| {
            prop::collection::vec(0.001f64..1.0, t * k).prop_map(move |raw| {
                let probs: Vec<f64> = raw
                    .chunks(k)
                    .flat_map(|r| {
                        let s: f64 = r.iter().sum();
                        r.iter().map(move |v| v / s).collect::<Vec<_>>()
                    })
                    .collect();
                PredictiveSample::new(t, k, probs).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn decomposition_identity(s in arb_sample()) {
            let (a, e, m) = (aleatoric(&s), epistemic(&s), s.mean());
            let k = s.classes();
            for i in 0..k {
                for j in 0..k {
                    let total = if i == j { m[i] } else { 0.0 } - m[i] * m[j];
                    prop_assert!((a.get(i, j) + e.get(i, j) - total).abs() < 1e-10);
                }
                let row_sum: f64 = (0..k).map(|j| a.get(i, j)).sum();
                prop_assert!(row_sum.abs() < 1e-12);
            }
        }

        #[test]
        fn bounds_and_trace_shortcuts(s in arb_sample()) {
            let r = UncertaintyRecord::from_sample(&s);
            prop_assert!(r.entropy <= (s.classes() as f64).ln() + 1e-12);
            prop_assert!(r.mutual_information >= 0.0 && r.mutual_information <= r.entropy + 1e-12);
            prop_assert!((r.aleatoric - aleatoric(&s).trace()).abs() < 1e-12);
            prop_assert!((r.epistemic - epistemic(&s).trace()).abs() < 1e-12);
        }

        #[test]
        fn duplicating_rows_keeps_epistemic_trace(s in arb_sample()) {
            let doubled: Vec<Vec<f64>> = s.rows().chain(s.rows()).map(<[f64]>::to_vec).collect();
            let d = PredictiveSample::from_rows(&doubled).unwrap();
            prop_assert!((epistemic(&d).trace() - epistemic(&s).trace()).abs() < 1e-12);
        }

        #[test]
        fn class_permutation_invariance(s in arb_sample()) {
            let k = s.classes();
            let rev: Vec<Vec<f64>> = s.rows().map(|r| r.iter().rev().copied().collect()).collect();
            let p = PredictiveSample::from_rows(&rev).unwrap();
            let (a, b) = (UncertaintyRecord::from_sample(&s), UncertaintyRecord::from_sample(&p));
            for m in Measure::ALL {
                prop_assert!((a.get(m) - b.get(m)).abs() < 1e-12);
            }
            let (e, f) = (epistemic(&s), epistemic(&p));
            prop_assert!((e.get(0, 1) - f.get(k - 1, k - 2)).abs() < 1e-15);
        }
    }
}
