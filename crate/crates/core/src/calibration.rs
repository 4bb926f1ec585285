//! Regression correction of raw sensor PM2.5 against reference monitors.
//!
//! Four candidate forms are fitted by ordinary least squares (linear or
//! quadratic in the sensor reading, with or without an intercept) and the
//! one with the lowest BIC is applied network-wide.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{AlignedPair, TimeSeries};

/// Keeps BIC finite on exact fits: RSS is floored at `RSS_FLOOR_PER_PAIR * n`.
pub const RSS_FLOOR_PER_PAIR: f64 = 1e-12;

/// Relative BIC difference below which two candidates count as tied.
const BIC_TIE_TOL: f64 = 1e-9;

/// Pivot tolerance relative to the original column norm.
const RANK_TOL: f64 = 1e-9;

const COLUMN_NAMES: [&str; 3] = ["intercept", "pms", "pms^2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    LinearZero,
    LinearFree,
    QuadraticZero,
    QuadraticFree,
}

impl ModelForm {
    /// Candidates in tie-break preference order: fewer coefficients first,
    /// then zero intercept.
    pub const PREFERENCE: [ModelForm; 4] = [
        ModelForm::LinearZero,
        ModelForm::QuadraticZero,
        ModelForm::LinearFree,
        ModelForm::QuadraticFree,
    ];

    pub fn is_quadratic(self) -> bool {
        matches!(self, ModelForm::QuadraticZero | ModelForm::QuadraticFree)
    }

    pub fn has_intercept(self) -> bool {
        matches!(self, ModelForm::LinearFree | ModelForm::QuadraticFree)
    }

    /// Number of fitted coefficients `k`.
    pub fn n_coefficients(self) -> usize {
        1 + usize::from(self.is_quadratic()) + usize::from(self.has_intercept())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelForm::LinearZero => "linear_zero",
            ModelForm::LinearFree => "linear_free",
            ModelForm::QuadraticZero => "quadratic_zero",
            ModelForm::QuadraticFree => "quadratic_free",
        }
    }

    /// Design-matrix column indices into `[1, pms, pms^2]`.
    fn columns(self) -> &'static [usize] {
        match self {
            ModelForm::LinearZero => &[1],
            ModelForm::LinearFree => &[0, 1],
            ModelForm::QuadraticZero => &[1, 2],
            ModelForm::QuadraticFree => &[0, 1, 2],
        }
    }
}

impl fmt::Display for ModelForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub rmse: f64,
    /// Coefficient of determination; absent when the reference is constant.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub r2: Option<f64>,
    pub rmse: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub form: ModelForm,
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: Option<f64>,
    /// Training pair count.
    pub n: usize,
    pub metrics: FitMetrics,
}

impl CalibrationModel {
    /// `beta0 + beta1 * pms`, with no fit metadata. Useful for fixed corrections.
    pub fn linear(beta0: f64, beta1: f64) -> Self {
        CalibrationModel {
            form: if beta0 == 0.0 {
                ModelForm::LinearZero
            } else {
                ModelForm::LinearFree
            },
            beta0,
            beta1,
            beta2: None,
            n: 0,
            metrics: FitMetrics {
                r2: None,
                rmse: f64::NAN,
                bic: f64::NAN,
            },
        }
    }

    pub fn identity() -> Self {
        Self::linear(0.0, 1.0)
    }

    /// Unclamped model value.
    pub fn predict(&self, pms: f64) -> f64 {
        self.beta0 + self.beta1 * pms + self.beta2.unwrap_or(0.0) * pms * pms
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("{form}: need at least {needed} pairs, got {n}")]
    InsufficientData {
        form: ModelForm,
        n: usize,
        needed: usize,
    },
    #[error("{form}: design is rank deficient in column {column}")]
    Degenerate {
        form: ModelForm,
        column: &'static str,
    },
    #[error("pair {index} is not finite")]
    NonFinite { index: usize },
    #[error("no candidate model could be fitted: {0}")]
    NoCandidate(Box<FitError>),
}

/// Solves `min ||X b - y||` by Householder QR. `cols` are the columns of `X`.
/// On rank deficiency returns the index of the first dependent column.
fn householder_lstsq(mut cols: Vec<Vec<f64>>, mut y: Vec<f64>) -> Result<Vec<f64>, usize> {
    let n = y.len();
    let k = cols.len();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut diag = vec![0.0; k];
    for j in 0..k {
        let norm = cols[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norms[j] == 0.0 || norm <= RANK_TOL * norms[j] {
            return Err(j);
        }
        let alpha = if cols[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        let reflect = |target: &mut [f64]| {
            let dot: f64 = v.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
            let scale = 2.0 * dot / vnorm2;
            for (t, vi) in target.iter_mut().zip(&v) {
                *t -= scale * vi;
            }
        };
        for col in cols.iter_mut().skip(j + 1) {
            reflect(&mut col[j..]);
        }
        reflect(&mut y[j..n]);
        diag[j] = alpha;
    }
    let mut beta = vec![0.0; k];
    for j in (0..k).rev() {
        let mut acc = y[j];
        for (m, b) in beta.iter().enumerate().skip(j + 1) {
            acc -= cols[m][j] * b;
        }
        beta[j] = acc / diag[j];
    }
    Ok(beta)
}

fn residual_sum_of_squares(model: &CalibrationModel, pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(x, y)| {
            let r = y - model.predict(x);
            r * r
        })
        .sum()
}

/// `n ln(max(RSS, floor) / n) + k ln(n)` with `floor = 1e-12 * n`.
pub fn bic_score(n: usize, rss: f64, k: usize) -> f64 {
    let nf = n as f64;
    let rss = rss.max(RSS_FLOOR_PER_PAIR * nf);
    nf * (rss / nf).ln() + k as f64 * nf.ln()
}

pub fn bic(model: &CalibrationModel, pairs: &[(f64, f64)]) -> f64 {
    bic_score(
        pairs.len(),
        residual_sum_of_squares(model, pairs),
        model.form.n_coefficients(),
    )
}

/// Accuracy of an arbitrary predictor over `(pms, ref)` pairs.
pub fn accuracy_of(predict: impl Fn(f64) -> f64, pairs: &[(f64, f64)]) -> Accuracy {
    let n = pairs.len() as f64;
    let rss: f64 = pairs
        .iter()
        .map(|&(x, y)| {
            let r = y - predict(x);
            r * r
        })
        .sum();
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let tss: f64 = pairs.iter().map(|p| (p.1 - mean) * (p.1 - mean)).sum();
    Accuracy {
        rmse: (rss / n).sqrt(),
        r2: (tss > 0.0).then(|| 1.0 - rss / tss),
    }
}

pub fn metrics(model: &CalibrationModel, pairs: &[(f64, f64)]) -> Accuracy {
    accuracy_of(|x| model.predict(x), pairs)
}

/// Ordinary least squares fit of one model form to `(pms, ref)` pairs.
pub fn fit(pairs: &[(f64, f64)], form: ModelForm) -> Result<CalibrationModel, FitError> {
    let k = form.n_coefficients();
    if pairs.len() < k + 2 {
        return Err(FitError::InsufficientData {
            form,
            n: pairs.len(),
            needed: k + 2,
        });
    }
    if let Some(index) = pairs
        .iter()
        .position(|(x, y)| !(x.is_finite() && y.is_finite()))
    {
        return Err(FitError::NonFinite { index });
    }
    // A single sensor level cannot identify a slope under any form.
    let x0 = pairs[0].0;
    if pairs.iter().all(|p| p.0 == x0) {
        return Err(FitError::Degenerate {
            form,
            column: COLUMN_NAMES[1],
        });
    }
    // Canonical order makes the fit bit-identical under input reordering.
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let design = form.columns();
    let cols: Vec<Vec<f64>> = design
        .iter()
        .map(|&c| {
            sorted
                .iter()
                .map(|&(x, _)| match c {
                    0 => 1.0,
                    1 => x,
                    _ => x * x,
                })
                .collect()
        })
        .collect();
    let y: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let beta = householder_lstsq(cols, y).map_err(|j| FitError::Degenerate {
        form,
        column: COLUMN_NAMES[design[j]],
    })?;

    let mut coef = [0.0f64; 3];
    for (&c, b) in design.iter().zip(&beta) {
        coef[c] = *b;
    }
    let mut model = CalibrationModel {
        form,
        beta0: coef[0],
        beta1: coef[1],
        beta2: form.is_quadratic().then_some(coef[2]),
        n: pairs.len(),
        metrics: FitMetrics {
            r2: None,
            rmse: 0.0,
            bic: 0.0,
        },
    };
    let acc = metrics(&model, &sorted);
    model.metrics = FitMetrics {
        r2: acc.r2,
        rmse: acc.rmse,
        bic: bic(&model, &sorted),
    };
    Ok(model)
}

/// Every candidate's fit outcome, in [`ModelForm::PREFERENCE`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelComparison {
    pub candidates: Vec<(ModelForm, Result<CalibrationModel, FitError>)>,
}

impl ModelComparison {
    pub fn run(pairs: &[(f64, f64)]) -> Self {
        ModelComparison {
            candidates: ModelForm::PREFERENCE
                .iter()
                .map(|&form| (form, fit(pairs, form)))
                .collect(),
        }
    }

    /// Minimum-BIC model; near-ties go to the earlier (simpler) candidate.
    pub fn best(&self) -> Result<CalibrationModel, FitError> {
        let mut best: Option<CalibrationModel> = None;
        for model in self.candidates.iter().filter_map(|(_, r)| r.as_ref().ok()) {
            match &best {
                Some(b) if model.metrics.bic >= b.metrics.bic - BIC_TIE_TOL * b.metrics.bic.abs().max(1.0) => {}
                _ => best = Some(*model),
            }
        }
        best.ok_or_else(|| {
            let first = self
                .candidates
                .iter()
                .find_map(|(_, r)| r.clone().err())
                .expect("at least one candidate failed");
            FitError::NoCandidate(Box::new(first))
        })
    }
}

pub fn select_model(pairs: &[(f64, f64)]) -> Result<CalibrationModel, FitError> {
    ModelComparison::run(pairs).best()
}

/// Converts aligned `(sensor, reference)` windows into fitting pairs.
pub fn pairs_from_alignment(pairs: &[AlignedPair]) -> Vec<(f64, f64)> {
    pairs.iter().map(|p| (p.a, p.b)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub series: TimeSeries,
    /// Windows whose model value was negative and clamped to zero.
    pub clamped: usize,
}

/// Evaluates the model on each window mean, clamping negatives to zero.
pub fn apply(model: &CalibrationModel, series: &TimeSeries) -> Applied {
    let mut clamped = 0;
    let windows = series
        .windows
        .iter()
        .map(|w| {
            let mut v = model.predict(w.mean);
            if v < 0.0 {
                v = 0.0;
                clamped += 1;
            }
            crate::timeseries::Window { mean: v, ..*w }
        })
        .collect();
    Applied {
        series: TimeSeries {
            node_id: series.node_id.clone(),
            window_len: series.window_len,
            windows,
        },
        clamped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

/// On-disk form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub form: ModelForm,
    pub coefficients: Coefficients,
    pub n: usize,
    pub metrics: FitMetrics,
    pub training_node: String,
    pub training_window: Option<TrainingWindow>,
}

impl ModelDocument {
    pub fn new(model: &CalibrationModel, training_node: &str, pairs: &[AlignedPair]) -> Self {
        let training_window = match (pairs.first(), pairs.last()) {
            (Some(a), Some(b)) => Some(TrainingWindow {
                start: a.start,
                end: b.start,
            }),
            _ => None,
        };
        ModelDocument {
            form: model.form,
            coefficients: Coefficients {
                beta0: model.beta0,
                beta1: model.beta1,
                beta2: model.beta2,
            },
            n: model.n,
            metrics: model.metrics,
            training_node: training_node.to_string(),
            training_window,
        }
    }

    pub fn model(&self) -> CalibrationModel {
        CalibrationModel {
            form: self.form,
            beta0: self.coefficients.beta0,
            beta1: self.coefficients.beta1,
            beta2: self.coefficients.beta2,
            n: self.n,
            metrics: self.metrics,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::{Window, WindowLen};
    use chrono::{Duration, TimeZone};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal;

    /// Normal-equations solve by Cramer's rule; independent of the QR path.
    fn normal_equations(pairs: &[(f64, f64)], quadratic: bool) -> Vec<f64> {
        let k = if quadratic { 3 } else { 2 };
        let mut a = vec![vec![0.0; k]; k];
        let mut b = vec![0.0; k];
        for &(x, y) in pairs {
            let row: Vec<f64> = (0..k).map(|p| x.powi(p as i32)).collect();
            for i in 0..k {
                b[i] += row[i] * y;
                for j in 0..k {
                    a[i][j] += row[i] * row[j];
                }
            }
        }
        let det = |m: &Vec<Vec<f64>>| -> f64 {
            if k == 2 {
                m[0][0] * m[1][1] - m[0][1] * m[1][0]
            } else {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
        };
        let d = det(&a);
        (0..k)
            .map(|c| {
                let mut m = a.clone();
                for r in 0..k {
                    m[r][c] = b[r];
                }
                det(&m) / d
            })
            .collect()
    }

    fn noisy_line(seed: u64, n: usize) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 5.0).unwrap();
        (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(10.0..250.0);
                (x, 0.7 * x + 5.0 + noise.sample(&mut rng))
            })
            .collect()
    }

    #[test]
    fn exact_line_free_intercept() {
        let pairs: Vec<_> = (0..10).map(|i| (i as f64, 2.0 + 3.0 * i as f64)).collect();
        let m = fit(&pairs, ModelForm::LinearFree).unwrap();
        assert!((m.beta0 - 2.0).abs() < 1e-12);
        assert!((m.beta1 - 3.0).abs() < 1e-12);
        assert!(m.metrics.rmse < 1e-12);
        assert_eq!(m.beta2, None);
    }

    #[test]
    fn exact_proportionality_zero_intercept() {
        let pairs: Vec<_> = (1..10).map(|i| (i as f64, 0.65 * i as f64)).collect();
        let m = fit(&pairs, ModelForm::LinearZero).unwrap();
        assert!((m.beta1 - 0.65).abs() < 1e-14);
        assert_eq!(m.beta0, 0.0);
    }

    #[test]
    fn noisy_fit_matches_normal_equations() {
        let pairs = noisy_line(42, 264);
        let m = fit(&pairs, ModelForm::LinearFree).unwrap();
        let oracle = normal_equations(&pairs, false);
        assert!((m.beta0 - oracle[0]).abs() < 1e-8);
        assert!((m.beta1 - oracle[1]).abs() < 1e-10);
        assert!((m.beta1 - 0.7).abs() <= 0.05);
        assert!((m.beta0 - 5.0).abs() <= 3.0);

        let q = fit(&pairs, ModelForm::QuadraticFree).unwrap();
        let oracle = normal_equations(&pairs, true);
        assert!((q.beta0 - oracle[0]).abs() < 1e-6);
        assert!((q.beta1 - oracle[1]).abs() < 1e-7);
        assert!((q.beta2.unwrap() - oracle[2]).abs() < 1e-9);
    }

    #[test]
    fn rank_deficiency_names_column() {
        let pairs: Vec<_> = (0..6).map(|i| (4.0, i as f64)).collect();
        for form in ModelForm::PREFERENCE {
            assert!(matches!(
                fit(&pairs, form),
                Err(FitError::Degenerate { column: "pms", .. })
            ));
        }
        let two_levels: Vec<_> = (0..8).map(|i| ((i % 2) as f64 + 1.0, i as f64)).collect();
        assert!(matches!(
            fit(&two_levels, ModelForm::QuadraticFree),
            Err(FitError::Degenerate { column: "pms^2", .. })
        ));
        assert!(matches!(
            select_model(&pairs),
            Err(FitError::NoCandidate(_))
        ));
    }

    #[test]
    fn too_few_pairs() {
        let pairs = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.5)];
        assert!(matches!(
            fit(&pairs, ModelForm::LinearFree),
            Err(FitError::InsufficientData { needed: 4, .. })
        ));
        assert!(fit(&pairs, ModelForm::LinearZero).is_ok());
    }

    #[test]
    fn bic_examples() {
        let expected = 50.0 * 4f64.ln() + 2.0 * 50f64.ln();
        assert!((bic_score(50, 200.0, 2) - 77.139).abs() < 1e-3);
        assert!((bic_score(50, 200.0, 2) - expected).abs() < 1e-12);
        let diff = bic_score(100, 37.5, 3) - bic_score(100, 37.5, 2);
        assert!((diff - 100f64.ln()).abs() < 1e-12);
        let exact = bic_score(100, 0.0, 3);
        assert!(exact.is_finite());
        assert!(exact < bic_score(100, 1e-6, 1));
    }

    #[test]
    fn selects_linear_for_linear_data() {
        let pairs = noisy_line(3, 264);
        let m = select_model(&pairs).unwrap();
        assert_eq!(m.form, ModelForm::LinearFree);
    }

    #[test]
    fn selects_quadratic_for_parabola() {
        let pairs: Vec<_> = (0..=40).map(|i| {
            let x = i as f64 * 0.25;
            (x, x * x)
        }).collect();
        let lin = fit(&pairs, ModelForm::LinearFree).unwrap();
        let quad = fit(&pairs, ModelForm::QuadraticZero).unwrap();
        let rss = |m: &CalibrationModel| -> f64 {
            pairs.iter().map(|&(x, y)| (y - m.predict(x)).powi(2)).sum()
        };
        assert!(rss(&quad) < rss(&lin));
        assert!(select_model(&pairs).unwrap().form.is_quadratic());
    }

    #[test]
    fn exact_data_prefers_fewest_coefficients() {
        let pairs: Vec<_> = (1..20).map(|i| (i as f64, i as f64)).collect();
        let m = select_model(&pairs).unwrap();
        assert_eq!(m.form, ModelForm::LinearZero);
        assert!((m.beta1 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn metrics_examples() {
        let pairs: Vec<_> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let perfect = metrics(&CalibrationModel::linear(0.0, 2.0), &pairs);
        assert_eq!(perfect.rmse, 0.0);
        assert_eq!(perfect.r2, Some(1.0));
        let mean = pairs.iter().map(|p| p.1).sum::<f64>() / 10.0;
        let flat = metrics(&CalibrationModel::linear(mean, 0.0), &pairs);
        assert!(flat.r2.unwrap().abs() < 1e-15);
        let constant_ref: Vec<_> = (0..5).map(|i| (i as f64, 3.0)).collect();
        assert_eq!(metrics(&CalibrationModel::identity(), &constant_ref).r2, None);
    }

    #[test]
    fn metrics_match_two_pass_oracle() {
        let pairs = noisy_line(9, 200);
        let m = fit(&pairs, ModelForm::LinearFree).unwrap();
        let acc = metrics(&m, &pairs);
        // Two-pass oracle: mean first, then squared deviations.
        let n = pairs.len() as f64;
        let mut ybar = 0.0;
        for p in &pairs {
            ybar += p.1 / n;
        }
        let (mut rss, mut tss) = (0.0, 0.0);
        for &(x, y) in &pairs {
            let e = y - (m.beta0 + m.beta1 * x);
            rss += e * e;
            tss += (y - ybar) * (y - ybar);
        }
        let rmse = (rss / n).sqrt();
        assert!((acc.rmse - rmse).abs() <= 1e-9 * rmse);
        assert!((acc.r2.unwrap() - (1.0 - rss / tss)).abs() <= 1e-9);
    }

    fn series(means: &[f64]) -> TimeSeries {
        let t0 = Utc.with_ymd_and_hms(2020, 9, 10, 0, 0, 0).unwrap();
        TimeSeries {
            node_id: "n".into(),
            window_len: WindowLen::Hour,
            windows: means
                .iter()
                .enumerate()
                .map(|(i, &mean)| Window {
                    start: t0 + Duration::hours(i as i64),
                    mean,
                    coverage: 0.9,
                    n_samples: 324,
                    valid: i != 1,
                })
                .collect(),
        }
    }

    #[test]
    fn apply_examples() {
        let s = series(&[4.0, 17.0, 250.0]);
        let same = apply(&CalibrationModel::identity(), &s);
        assert_eq!(same.series, s);
        assert_eq!(same.clamped, 0);

        let clamp = apply(&CalibrationModel::linear(-10.0, 1.0), &series(&[4.0]));
        assert_eq!(clamp.series.windows[0].mean, 0.0);
        assert_eq!(clamp.clamped, 1);

        let out = apply(&CalibrationModel::linear(1.2, 0.68), &series(&[50.0, 100.0, 150.0]));
        let want = [1.2 + 0.68 * 50.0, 1.2 + 0.68 * 100.0, 1.2 + 0.68 * 150.0];
        for (w, e) in out.series.windows.iter().zip(want) {
            assert!((w.mean - e).abs() < 1e-12);
        }
        assert!((want[0] - 35.2).abs() < 1e-12 && (want[2] - 103.2).abs() < 1e-12);
        assert!(!out.series.windows[1].valid);
        assert_eq!(out.series.windows[1].coverage, 0.9);
    }

    #[test]
    fn document_round_trip() {
        let pairs = noisy_line(5, 50);
        let m = select_model(&pairs).unwrap();
        let doc = ModelDocument::new(&m, "L7-out", &[]);
        let json = serde_json::to_string(&doc).unwrap();
        let back: ModelDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back.model(), m);
        assert!(json.contains("\"form\":\"linear_free\""));
    }
}
