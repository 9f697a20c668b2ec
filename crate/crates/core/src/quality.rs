//! Reference metrics and rank correlations for prompt selection.

use serde::Serialize;

use crate::io::VideoVolume;
use crate::losses::{ssim_loss, LossError};

/// PSNR reported when the error is (numerically) zero.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Candidate `(positive, negative)` prompt pairs, in table order.
pub const PROMPT_TABLE: [(&str, &str); 6] = [
    ("a sharp image", "a blur image"),
    ("a sharp image", "a image with blur and turbulence distortion"),
    ("a clean and sharp natural image", "a degraded image with noise and turbulence distortion"),
    ("a clean and sharp natural image", "a degraded image with mosaic and turbulence distortion"),
    ("a clean and sharp natural image", "a low-resolution image with mosaic and turbulence distortion"),
    (
        "a clean and sharp natural image with table and alarm clock and books",
        "a low-resolution image with mosaic and turbulence distortion",
    ),
];

/// Zero-based index of the default training pair (the third row).
pub const DEFAULT_PROMPT_INDEX: usize = 2;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("at least {0} samples required, got {1}")]
    TooShort(usize, usize),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("no candidate sequences")]
    NoCandidates,
    #[error(transparent)]
    Loss(#[from] LossError),
}

fn mse(a: &[f32], b: &[f32]) -> Result<f64, QualityError> {
    if a.len() != b.len() {
        return Err(QualityError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(QualityError::TooShort(1, 0));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64)
}

/// `10·log10(peak² / mse)` given a precomputed MSE, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64, QualityError> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// PSNR over every sample of two videos.
pub fn volume_psnr(a: &VideoVolume, b: &VideoVolume) -> Result<f64, QualityError> {
    psnr(a.data(), b.data(), 1.0)
}

/// Mean of per-frame PSNR.
pub fn mean_frame_psnr(a: &VideoVolume, b: &VideoVolume) -> Result<f64, QualityError> {
    if !a.same_dims(b) {
        return Err(QualityError::Length(a.data().len(), b.data().len()));
    }
    let mut s = 0.0;
    for t in 0..a.frames() {
        s += psnr(a.frame(t), b.frame(t), 1.0)?;
    }
    Ok(s / a.frames().max(1) as f64)
}

/// Mean windowed SSIM, defined as `1 − ssim_loss`.
pub fn ssim_eval(a: &[f32], b: &[f32], dims: [usize; 3]) -> Result<f64, QualityError> {
    Ok(1.0 - ssim_loss(a, b, dims)?)
}

/// Mean of per-frame SSIM.
pub fn mean_frame_ssim(a: &VideoVolume, b: &VideoVolume) -> Result<f64, QualityError> {
    if !a.same_dims(b) {
        return Err(QualityError::Length(a.data().len(), b.data().len()));
    }
    let dims = [a.height(), a.width(), a.channels()];
    let mut s = 0.0;
    for t in 0..a.frames() {
        s += ssim_eval(a.frame(t), b.frame(t), dims)?;
    }
    Ok(s / a.frames().max(1) as f64)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), QualityError> {
    if a.len() != b.len() {
        return Err(QualityError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(QualityError::TooShort(2, a.len()));
    }
    if let Some(i) = a.iter().chain(b).position(|v| !v.is_finite()) {
        return Err(QualityError::NonFinite(i % a.len()));
    }
    Ok(())
}

/// Pairs tied within runs of equal values of a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Stable merge sort of `v` returning the number of inversions.
fn sort_count_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count_swaps(&mut v[..mid], buf) + sort_count_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Pair counts behind tau-b: `(C − D, n0 − n1, n0 − n2)`.
fn kendall_counts(a: &[f64], b: &[f64]) -> (i64, u64, u64) {
    let n = a.len() as u64;
    let n0 = n * (n - 1) / 2;
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let swaps = sort_count_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);
    let num = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    (num, n0 - n1, n0 - n2)
}

/// Kendall's tau-b in `O(n log n)`. Returns 0 (with a warning) if either input is constant.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, QualityError> {
    check_pair(a, b)?;
    let (num, da, db) = kendall_counts(a, b);
    if da == 0 || db == 0 {
        log::warn!("kendall_tau: constant input, correlation defined as 0");
        return Ok(0.0);
    }
    Ok(num as f64 / ((da as f64) * (db as f64)).sqrt())
}

/// Twice the average (1-based) rank of each sample; integral even with ties.
pub fn doubled_ranks(v: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0u64; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, doubled mean = start + 1 + end
        let r = (start + 1 + end) as u64;
        for &i in &idx[start..end] {
            out[i] = r;
        }
        start = end;
    }
    out
}

/// Pearson correlation of integer samples, computed exactly up to the final division.
pub fn pearson_exact(x: &[u64], y: &[u64]) -> Option<f64> {
    let n = x.len() as i128;
    let (sx, sy): (i128, i128) = (x.iter().map(|&v| v as i128).sum(), y.iter().map(|&v| v as i128).sum());
    let sxx: i128 = x.iter().map(|&v| (v as i128) * (v as i128)).sum();
    let syy: i128 = y.iter().map(|&v| (v as i128) * (v as i128)).sum();
    let sxy: i128 = x.iter().zip(y).map(|(&a, &b)| a as i128 * b as i128).sum();
    let cov = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx == 0 || vy == 0 {
        return None;
    }
    Some(cov as f64 / ((vx as f64) * (vy as f64)).sqrt())
}

/// Spearman's rho with average ranks for ties. Returns 0 (with a warning) if either input is constant.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, QualityError> {
    check_pair(a, b)?;
    match pearson_exact(&doubled_ranks(a), &doubled_ranks(b)) {
        Some(r) => Ok(r),
        None => {
            log::warn!("spearman_rho: constant input, correlation defined as 0");
            Ok(0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptScore {
    pub index: usize,
    pub name: String,
    pub krcc: f64,
    pub srcc: f64,
    pub combined: f64,
    /// 1-based position in the ranking.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    /// One entry per candidate, in input order.
    pub scores: Vec<PromptScore>,
    /// Candidate indices, best first.
    pub ranking: Vec<usize>,
}

impl CorrelationReport {
    pub fn best(&self) -> &PromptScore {
        &self.scores[self.ranking[0]]
    }
}

/// Orders indices by descending score, ties to the lower index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Scores each candidate sequence by `(KRCC + SRCC) / 2` against the reference sequence.
pub fn select_prompt(reference: &[f64], candidates: &[(String, Vec<f64>)]) -> Result<CorrelationReport, QualityError> {
    if candidates.is_empty() {
        return Err(QualityError::NoCandidates);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (index, (name, seq)) in candidates.iter().enumerate() {
        let krcc = kendall_tau(reference, seq)?;
        let srcc = spearman_rho(reference, seq)?;
        scores.push(PromptScore {
            index,
            name: name.clone(),
            krcc,
            srcc,
            combined: (krcc + srcc) / 2.0,
            rank: 0,
        });
    }
    let ranking = rank_descending(&scores.iter().map(|s| s.combined).collect::<Vec<_>>());
    for (pos, &i) in ranking.iter().enumerate() {
        scores[i].rank = pos + 1;
    }
    Ok(CorrelationReport { scores, ranking })
}
