//! Statistical machinery: normality testing of similarity sets, two-sample
//! KS distance for response indistinguishability, and the attack / retrieval
//! metrics used by the evaluation harness.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::RetrievalResult;

/// Minimum sample size for the kurtosis transform to be valid.
pub const MIN_NORMALITY_N: usize = 20;

/// Omnibus normality test outcome.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormalityResult {
    pub k2: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Binary confusion counts; positives are member-attack queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.r#fn
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.r#fn += 1,
        }
    }
}

/// Aggregated metrics; optional fields are filled only by runs that
/// measure them.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub adjusted_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
}

fn central_moments(sample: &[f64]) -> (f64, f64, f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in sample {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (mean, m2 / n, m3 / n, m4 / n)
}

/// D'Agostino transform of sample skewness to an approximate standard
/// normal deviate.
fn skew_z(g1: f64, n: usize) -> f64 {
    let nf = n as f64;
    let y = g1 * (((nf + 1.0) * (nf + 3.0)) / (6.0 * (nf - 2.0))).sqrt();
    let beta2 = 3.0 * (nf * nf + 27.0 * nf - 70.0) * (nf + 1.0) * (nf + 3.0)
        / ((nf - 2.0) * (nf + 5.0) * (nf + 7.0) * (nf + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    // asinh form: exactly 0 for a symmetric sample
    delta * (y / alpha).asinh()
}

/// Anscombe-Glynn transform of sample kurtosis to an approximate standard
/// normal deviate.
fn kurtosis_z(b2: f64, n: usize) -> f64 {
    let nf = n as f64;
    let e = 3.0 * (nf - 1.0) / (nf + 1.0);
    let var = 24.0 * nf * (nf - 2.0) * (nf - 3.0)
        / ((nf + 1.0) * (nf + 1.0) * (nf + 3.0) * (nf + 5.0));
    let x = (b2 - e) / var.sqrt();
    let sqrt_beta1 = 6.0 * (nf * nf - 5.0 * nf + 2.0) / ((nf + 7.0) * (nf + 9.0))
        * ((6.0 * (nf + 3.0) * (nf + 5.0)) / (nf * (nf - 2.0) * (nf - 3.0))).sqrt();
    let a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + (1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + x * (2.0 / (a - 4.0)).sqrt();
    let term2 = denom.signum() * ((1.0 - 2.0 / a) / denom.abs()).cbrt();
    (term1 - term2) / (2.0 / (9.0 * a)).sqrt()
}

/// Omnibus normality test: K² = Z₁² + Z₂² with the chi-square(2) upper
/// tail in closed form, p = exp(−K²/2).
pub fn dagostino_pearson(sample: &[f64]) -> Result<NormalityResult> {
    let n = sample.len();
    if n < MIN_NORMALITY_N {
        return Err(Error::SampleTooSmall {
            n,
            min: MIN_NORMALITY_N,
        });
    }
    let (_, m2, m3, m4) = central_moments(sample);
    if m2 <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let g1 = m3 / m2.powf(1.5);
    let b2 = m4 / (m2 * m2);
    let z1 = skew_z(g1, n);
    let z2 = kurtosis_z(b2, n);
    let k2 = z1 * z1 + z2 * z2;
    Ok(NormalityResult {
        k2,
        p_value: (-k2 / 2.0).exp(),
        n,
    })
}

/// Two-sample Kolmogorov-Smirnov statistic via a merged sweep over both
/// sorted samples: D = sup |F_a − F_b|. Statistic only, no p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    // track the numerator of |i/na - j/nb| over the common denominator
    // na*nb so the supremum is exact; divide once at the end
    let mut d = 0usize;
    while i < na && j < nb {
        let x = sa[i].min(sb[j]);
        while i < na && sa[i] <= x {
            i += 1;
        }
        while j < nb && sb[j] <= x {
            j += 1;
        }
        let gap = (i * nb).abs_diff(j * na);
        if gap > d {
            d = gap;
        }
    }
    Ok(d as f64 / (na * nb) as f64)
}

/// Eq-style adversary advantage: max(acc, 1−acc) − 0.5.
pub fn adjusted_attack_accuracy(counts: &ConfusionCounts) -> Result<f64> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::EmptySample);
    }
    let acc = (counts.tp + counts.tn) as f64 / total as f64;
    Ok(acc.max(1.0 - acc) - 0.5)
}

/// Standard classification metrics; precision and recall are 0 by
/// convention when their denominator is 0.
pub fn classification_metrics(counts: &ConfusionCounts) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::EmptySample);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let accuracy = (counts.tp + counts.tn) as f64 / total as f64;
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.r#fn);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        accuracy,
        adjusted_accuracy: accuracy.max(1.0 - accuracy) - 0.5,
        precision,
        recall,
        f1,
        ks: None,
        r_at_k: None,
        em: None,
    })
}

/// Fraction of retrievals whose hits contain the gold document.
pub fn recall_at_k(results: &[(RetrievalResult, String)]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptySample);
    }
    let hits = results.iter().filter(|(r, gold)| r.contains(gold)).count();
    Ok(hits as f64 / results.len() as f64)
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Fraction of responses containing any gold string, case-insensitive,
/// after whitespace normalization. Containment, not exact equality.
pub fn em_containment(answers: &[(String, Vec<String>)]) -> Result<f64> {
    if answers.is_empty() {
        return Err(Error::EmptySample);
    }
    let matched = answers
        .iter()
        .filter(|(resp, golds)| {
            let resp = normalize_ws(resp);
            golds.iter().any(|g| resp.contains(&normalize_ws(g)))
        })
        .count();
    Ok(matched as f64 / answers.len() as f64)
}
