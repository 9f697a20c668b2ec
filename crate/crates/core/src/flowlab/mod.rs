//! Temporal-consistency measurements: optical flow, warp error, tracks, x–t slices.

mod klt;
mod lk;
mod render;

use serde::Serialize;

use crate::io::{sample_plane, VideoVolume};
use crate::quality::psnr_from_mse;

pub use klt::{good_features, klt_track, min_eigen_response, track_smoothness, KltParams, Track, TrackSet};
pub use lk::{lk_flow, FlowParams};
pub use render::{flow_to_rgb, histogram_chart};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("{0}")]
    Shape(String),
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("row {row} outside a frame of height {height}")]
    RowOutOfRange { row: usize, height: usize },
    #[error("every frame pair is fully occluded")]
    AllOccluded,
}

/// Per-pixel displacement `(u, v)`, interleaved `H×W×2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self {
            width,
            height,
            data: std::iter::repeat_n([u, v], width * height).flatten().collect(),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f32, v: f32) {
        let i = 2 * (y * self.width + x);
        self.data[i] = u;
        self.data[i + 1] = v;
    }

    /// Bilinear lookup with border clamping.
    #[inline]
    pub fn sample(&self, x: f32, y: f32) -> (f32, f32) {
        (
            sample_plane(&self.data, self.width, self.height, 2, 0, x, y),
            sample_plane(&self.data, self.width, self.height, 2, 1, x, y),
        )
    }
}

/// Binary validity map, 1 = flow is trusted.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl OcclusionMask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&m| m == 1).count()
    }
}

/// Forward–backward consistency: a pixel is valid iff
/// `|w_f + ŵ_b|² < 0.01·(|w_f|² + |ŵ_b|²) + 0.5`, with `ŵ_b` the backward flow at `x + w_f`.
pub fn occlusion_mask(fwd: &FlowField, bwd: &FlowField) -> Result<OcclusionMask, FlowError> {
    if (fwd.width, fwd.height) != (bwd.width, bwd.height) {
        return Err(FlowError::Shape("forward and backward flows differ in size".into()));
    }
    let mut m = OcclusionMask::full(fwd.width, fwd.height);
    for y in 0..fwd.height {
        for x in 0..fwd.width {
            let (u, v) = fwd.at(x, y);
            let (bu, bv) = bwd.sample(x as f32 + u, y as f32 + v);
            let res = (u + bu).powi(2) + (v + bv).powi(2);
            let mag = u * u + v * v + bu * bu + bv * bv;
            if res >= 0.01 * mag + 0.5 {
                m.data[y * fwd.width + x] = 0;
            }
        }
    }
    Ok(m)
}

/// Samples frame `frame` (`H×W×C`) at `x + flow(x)` for every pixel.
pub fn warp_frame(frame: &[f32], width: usize, height: usize, channels: usize, flow: &FlowField) -> Vec<f32> {
    let mut out = vec![0.0f32; frame.len()];
    for y in 0..height {
        for x in 0..width {
            let (u, v) = flow.at(x, y);
            for c in 0..channels {
                out[(y * width + x) * channels + c] = sample_plane(frame, width, height, channels, c, x as f32 + u, y as f32 + v);
            }
        }
    }
    out
}

/// `Σ M·‖v_t − warp(v_{t+1})‖² / Σ M`; `None` when every pixel is occluded.
pub fn warp_error_pair(
    v_t: &[f32],
    v_t1: &[f32],
    dims: [usize; 3],
    flow: &FlowField,
    mask: &OcclusionMask,
) -> Result<Option<f64>, FlowError> {
    let [h, w, c] = dims;
    if v_t.len() != h * w * c || v_t1.len() != h * w * c || (flow.width, flow.height) != (w, h) || (mask.width, mask.height) != (w, h) {
        return Err(FlowError::Shape("frames, flow and mask must share dimensions".into()));
    }
    let valid = mask.valid_count();
    if valid == 0 {
        return Ok(None);
    }
    let warped = warp_frame(v_t1, w, h, c, flow);
    let mut s = 0.0f64;
    for i in 0..h * w {
        if mask.data[i] == 1 {
            for ch in 0..c {
                let d = v_t[i * c + ch] as f64 - warped[i * c + ch] as f64;
                s += d * d;
            }
        }
    }
    Ok(Some(s / valid as f64))
}

/// Per-pair results of [`warp_error_video`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WarpErrorReport {
    pub mean: f64,
    /// `None` for pairs skipped as fully occluded.
    pub pairs: Vec<Option<f64>>,
}

pub fn forward_flows(video: &VideoVolume, params: &FlowParams) -> Vec<FlowField> {
    let grays: Vec<_> = (0..video.frames()).map(|t| video.gray_frame(t)).collect();
    grays.windows(2).map(|p| lk_flow(&p[0], &p[1], params)).collect()
}

/// Mean warp error over consecutive frame pairs.
pub fn warp_error_report(video: &VideoVolume, params: &FlowParams) -> Result<WarpErrorReport, FlowError> {
    let t_n = video.frames();
    if t_n < 2 {
        return Err(FlowError::TooFewFrames(t_n));
    }
    let dims = [video.height(), video.width(), video.channels()];
    let grays: Vec<_> = (0..t_n).map(|t| video.gray_frame(t)).collect();
    let mut pairs = Vec::with_capacity(t_n - 1);
    for t in 0..t_n - 1 {
        let fwd = lk_flow(&grays[t], &grays[t + 1], params);
        let bwd = lk_flow(&grays[t + 1], &grays[t], params);
        let mask = occlusion_mask(&fwd, &bwd)?;
        pairs.push(warp_error_pair(video.frame(t), video.frame(t + 1), dims, &fwd, &mask)?);
    }
    let used: Vec<f64> = pairs.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(FlowError::AllOccluded);
    }
    Ok(WarpErrorReport {
        mean: used.iter().sum::<f64>() / used.len() as f64,
        pairs,
    })
}

pub fn warp_error_video(video: &VideoVolume, params: &FlowParams) -> Result<f64, FlowError> {
    Ok(warp_error_report(video, params)?.mean)
}

/// Row `y` of every frame stacked into a `T×W×C` image.
#[derive(Clone, Debug, PartialEq)]
pub struct XtSlice {
    pub frames: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn xt_slice(video: &VideoVolume, row: usize) -> Result<XtSlice, FlowError> {
    let [t_n, h, w, c] = video.dims();
    if row >= h {
        return Err(FlowError::RowOutOfRange { row, height: h });
    }
    let mut data = Vec::with_capacity(t_n * w * c);
    for t in 0..t_n {
        data.extend_from_slice(&video.frame(t)[row * w * c..(row + 1) * w * c]);
    }
    Ok(XtSlice {
        frames: t_n,
        width: w,
        channels: c,
        data,
    })
}

/// PSNR over the concatenation of every x–t slice (peak 1).
pub fn psnr_xt(video: &VideoVolume, reference: &VideoVolume) -> Result<f64, FlowError> {
    if !video.same_dims(reference) {
        return Err(FlowError::Shape(format!("{:?} vs {:?}", video.dims(), reference.dims())));
    }
    let mut s = 0.0f64;
    let mut n = 0usize;
    for y in 0..video.height() {
        let a = xt_slice(video, y)?;
        let b = xt_slice(reference, y)?;
        for (p, q) in a.data.iter().zip(&b.data) {
            let d = *p as f64 - *q as f64;
            s += d * d;
        }
        n += a.data.len();
    }
    Ok(psnr_from_mse(s / n.max(1) as f64, 1.0))
}

/// Mean over pixels of `|∂u/∂x| + |∂u/∂y| + |∂v/∂x| + |∂v/∂y|` (forward differences, zero at the far border).
pub fn flow_tv(flow: &FlowField) -> f64 {
    let (w, h) = (flow.width, flow.height);
    let mut s = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            if x + 1 < w {
                let (u2, v2) = flow.at(x + 1, y);
                s += ((u2 - u).abs() + (v2 - v).abs()) as f64;
            }
            if y + 1 < h {
                let (u2, v2) = flow.at(x, y + 1);
                s += ((u2 - u).abs() + (v2 - v).abs()) as f64;
            }
        }
    }
    s / (w * h).max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TvHistogram {
    /// `bins + 1` ascending edges; values above the last edge land in the last bin.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// TV of each consecutive frame pair.
    pub values: Vec<f64>,
    pub mean: f64,
}

pub fn histogram(values: &[f64], bins: usize, max: f64) -> (Vec<f64>, Vec<usize>) {
    let edges: Vec<f64> = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / max) * bins as f64).floor();
        let b = if b.is_nan() || b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        counts[b] += 1;
    }
    (edges, counts)
}

pub fn tv_histogram(video: &VideoVolume, bins: usize, max: f64, params: &FlowParams) -> Result<TvHistogram, FlowError> {
    if video.frames() < 2 {
        return Err(FlowError::TooFewFrames(video.frames()));
    }
    let values: Vec<f64> = forward_flows(video, params).iter().map(flow_tv).collect();
    let (edges, counts) = histogram(&values, bins.max(1), max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(TvHistogram {
        edges,
        counts,
        values,
        mean,
    })
}
