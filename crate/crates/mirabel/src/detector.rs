//! Member-attack query detection via Gumbel extreme-value thresholding.
//!
//! For a query q, the similarity set against the whole store (minus its
//! maximum) is treated as i.i.d. normal; the maximum of n such draws is
//! asymptotically Gumbel(mu_n, beta_n). A query whose maximum similarity
//! exceeds the Gumbel upper quantile at significance `rho` is flagged as a
//! member attack, and the argmax document is the identified target.

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};
use crate::index::{score_all, ScoreVector};

/// Below this corpus size the extreme-value asymptotics are meaningless;
/// detection refuses to guess.
pub const MIN_CORPUS: usize = 20;

/// Which location formula backs the Gumbel mean.
///
/// `Alg1` is the large-n form `mu_q + sigma_q * sqrt(2 ln n)`; it omits a
/// negative correction and therefore overestimates the true quantile
/// (~ +0.6 sigma at n = 1000), making detection conservative. `ExactEvt`
/// keeps the `ln(ln n) + ln(4 pi)` correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdVariant {
    #[default]
    #[serde(alias = "alg1")]
    Alg1,
    #[serde(alias = "exact")]
    ExactEvt,
}

impl std::str::FromStr for ThresholdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alg1" => Ok(ThresholdVariant::Alg1),
            "exact" | "exactevt" => Ok(ThresholdVariant::ExactEvt),
            other => Err(Error::Config(format!("unknown threshold variant `{other}`"))),
        }
    }
}

/// Leave-one-out similarity profile of one query: the maximum score, the
/// document achieving it, and mean/std of the remaining scores.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityProfile {
    pub n: usize,
    pub s_max: f64,
    pub argmax_row: usize,
    pub argmax_id: String,
    pub mu_q: f64,
    pub sigma_q: f64,
}

/// Gumbel parameters and the resulting detection threshold.
#[derive(Debug, Clone, Serialize)]
pub struct GumbelThreshold {
    pub rho: f64,
    pub variant: ThresholdVariant,
    pub mu_n: f64,
    pub beta_n: f64,
    pub c: f64,
    pub tau: f64,
}

/// Detection verdict: flagged iff `s_max > tau` (strict), with the argmax
/// document identified as the target when flagged.
#[derive(Debug, Clone, Serialize)]
pub struct DetectionOutcome {
    pub detected: bool,
    pub target_id: Option<String>,
    pub target_row: Option<usize>,
    pub profile: SimilarityProfile,
    pub threshold: GumbelThreshold,
}

/// Gumbel critical value `c = -ln(-ln(1 - rho))`.
pub fn critical_value(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidRho(rho));
    }
    Ok(-(-(1.0 - rho).ln()).ln())
}

/// Build the leave-one-out profile from a score vector.
///
/// Exactly one occurrence of the maximum (lowest row on ties) is removed
/// before computing `mu_q` and `sigma_q`; `sigma_q` is the population
/// standard deviation of the remaining n-1 scores.
pub fn build_profile(scores: &ScoreVector, store: &CorpusStore) -> Result<SimilarityProfile> {
    profile_skipping(scores, store, None)
}

/// Profile with one corpus row excluded from the score set entirely —
/// the defense's second-pass diagnostic after hiding a document.
pub fn profile_excluding(
    scores: &ScoreVector,
    store: &CorpusStore,
    skip_row: usize,
) -> Result<SimilarityProfile> {
    profile_skipping(scores, store, Some(skip_row))
}

fn profile_skipping(
    scores: &ScoreVector,
    store: &CorpusStore,
    skip_row: Option<usize>,
) -> Result<SimilarityProfile> {
    let raw = scores.scores();
    let skip = skip_row.filter(|&r| r < raw.len());
    let n = raw.len() - usize::from(skip.is_some());
    if n < MIN_CORPUS {
        return Err(Error::CorpusTooSmall { n, min: MIN_CORPUS });
    }

    // This runs on the retrieval hot path, once or twice per query, so
    // the loops are kept branch-free for auto-vectorization: plain sum
    // and sum-of-squares over everything, with the skipped row and the
    // maximum subtracted afterwards. Scores are f32 promoted to f64, so
    // the subtraction formula for the variance loses nothing that
    // matters next to the Gumbel approximation itself.
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for chunk in raw.chunks(4096) {
        let (mut s, mut q) = (0.0f64, 0.0f64);
        for &v in chunk {
            let v = f64::from(v);
            s += v;
            q += v * v;
        }
        sum += s;
        sumsq += q;
    }
    if !sum.is_finite() || !sumsq.is_finite() {
        let row = raw
            .iter()
            .position(|v| !v.is_finite())
            .unwrap_or_default();
        return Err(Error::NonFiniteScore { row });
    }

    // maximum over the non-skipped rows; ties resolve to the lowest row
    let (argmax, s_max) = match skip {
        None => slice_argmax(raw, 0),
        Some(r) => {
            sum -= f64::from(raw[r]);
            sumsq -= f64::from(raw[r]) * f64::from(raw[r]);
            let (i1, m1) = slice_argmax(&raw[..r], 0);
            let (i2, m2) = slice_argmax(&raw[r + 1..], r + 1);
            if m2 > m1 { (i2, m2) } else { (i1, m1) }
        }
    };

    let count = (n - 1) as f64;
    let mu_q = (sum - s_max) / count;
    let var = ((sumsq - s_max * s_max) / count - mu_q * mu_q).max(0.0);
    Ok(SimilarityProfile {
        n,
        s_max,
        argmax_row: argmax,
        argmax_id: store.document(argmax).id.clone(),
        mu_q,
        sigma_q: var.sqrt(),
    })
}

/// Index (offset by `base`) and value of the first maximum of `s`.
fn slice_argmax(s: &[f32], base: usize) -> (usize, f64) {
    let m = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let i = s.iter().position(|&v| v == m).unwrap_or_default();
    (base + i, f64::from(m))
}

/// Compute the Gumbel threshold `tau = mu_n + c * beta_n` for a profile.
pub fn gumbel_threshold(
    profile: &SimilarityProfile,
    rho: f64,
    variant: ThresholdVariant,
) -> Result<GumbelThreshold> {
    let c = critical_value(rho)?;
    let n = profile.n;
    if n < MIN_CORPUS {
        return Err(Error::CorpusTooSmall { n, min: MIN_CORPUS });
    }
    let root = (2.0 * (n as f64).ln()).sqrt();
    let location_shift = match variant {
        ThresholdVariant::Alg1 => root,
        ThresholdVariant::ExactEvt => {
            root - ((n as f64).ln().ln() + (4.0 * std::f64::consts::PI).ln()) / (2.0 * root)
        }
    };
    let mu_n = profile.mu_q + profile.sigma_q * location_shift;
    let beta_n = profile.sigma_q / root;
    let tau = mu_n + c * beta_n;
    Ok(GumbelThreshold {
        rho,
        variant,
        mu_n,
        beta_n,
        c,
        tau,
    })
}

/// Run detection on an already-computed score vector. This is the path the
/// defense uses so the retrieval scan is shared.
pub fn detect_scores(
    scores: &ScoreVector,
    store: &CorpusStore,
    rho: f64,
    variant: ThresholdVariant,
) -> Result<DetectionOutcome> {
    let profile = build_profile(scores, store)?;
    let threshold = gumbel_threshold(&profile, rho, variant)?;
    let detected = profile.s_max > threshold.tau;
    Ok(DetectionOutcome {
        detected,
        target_id: detected.then(|| profile.argmax_id.clone()),
        target_row: detected.then_some(profile.argmax_row),
        profile,
        threshold,
    })
}

/// Full detection for a unit query vector: score, profile, threshold,
/// strict comparison.
pub fn detect(
    store: &CorpusStore,
    query: &[f32],
    rho: f64,
    variant: ThresholdVariant,
) -> Result<DetectionOutcome> {
    let scores = score_all(store, query)?;
    detect_scores(&scores, store, rho, variant)
}
