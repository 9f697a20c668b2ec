//! Sparse Kanade–Lucas–Tomasi tracking.

use serde::{Deserialize, Serialize};

use super::lk::pyramid;
use crate::imgproc::{box_filter, gradients};
use crate::io::{GrayImage, VideoVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KltParams {
    pub max_corners: usize,
    /// Fraction of the strongest corner response a corner must reach.
    pub quality_level: f32,
    pub min_distance: f32,
    /// Forward–backward error above which a track dies, pixels.
    pub fb_threshold: f32,
    /// Odd tracking window side length.
    pub window: usize,
    pub levels: usize,
    pub iters: usize,
}

impl Default for KltParams {
    fn default() -> Self {
        Self {
            max_corners: 200,
            quality_level: 0.01,
            min_distance: 8.0,
            fb_threshold: 1.0,
            window: 15,
            levels: 3,
            iters: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Track {
    pub start_frame: usize,
    /// One position per frame from `start_frame` while alive.
    pub positions: Vec<(f32, f32)>,
    pub alive: bool,
}

impl Track {
    pub fn path_length(&self) -> f64 {
        self.positions
            .windows(2)
            .map(|w| (((w[1].0 - w[0].0) as f64).powi(2) + ((w[1].1 - w[0].1) as f64).powi(2)).sqrt())
            .sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
}

impl TrackSet {
    pub fn surviving(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| t.alive)
    }

    /// Fraction of surviving tracks whose path is shorter than `limit`; `None` without survivors.
    pub fn stationary_fraction(&self, limit: f64) -> Option<f64> {
        let alive: Vec<&Track> = self.surviving().collect();
        if alive.is_empty() {
            return None;
        }
        Some(alive.iter().filter(|t| t.path_length() < limit).count() as f64 / alive.len() as f64)
    }
}

/// Minimum eigenvalue of the 3×3 structure tensor at each pixel.
pub fn min_eigen_response(img: &GrayImage) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let (gx, gy) = gradients(&img.data, w, h);
    let xx: Vec<f32> = gx.iter().map(|v| v * v).collect();
    let xy: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
    let yy: Vec<f32> = gy.iter().map(|v| v * v).collect();
    let (a, b, c) = (box_filter(&xx, w, h, 1), box_filter(&xy, w, h, 1), box_filter(&yy, w, h, 1));
    (0..w * h)
        .map(|i| {
            let tr = 0.5 * (a[i] + c[i]);
            let d = (0.25 * (a[i] - c[i]).powi(2) + b[i] * b[i]).sqrt();
            tr - d
        })
        .collect()
}

/// Shi–Tomasi corners, strongest first, with non-maximum suppression and spacing.
pub fn good_features(img: &GrayImage, params: &KltParams) -> Vec<(f32, f32)> {
    let (w, h) = (img.width, img.height);
    let resp = min_eigen_response(img);
    let max = resp.iter().copied().fold(0.0f32, f32::max);
    if !(max > 1e-10) {
        return Vec::new();
    }
    let thresh = params.quality_level * max;
    let border = (params.window / 2).max(2);
    let mut cand: Vec<(f32, usize)> = Vec::new();
    for y in border..h.saturating_sub(border) {
        for x in border..w.saturating_sub(border) {
            let r = resp[y * w + x];
            if r < thresh {
                continue;
            }
            let is_max = (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| resp[yy * w + xx] <= r));
            if is_max {
                cand.push((r, y * w + x));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let md2 = params.min_distance * params.min_distance;
    let mut out: Vec<(f32, f32)> = Vec::new();
    for (_, i) in cand {
        if out.len() >= params.max_corners {
            break;
        }
        let p = ((i % w) as f32, (i / w) as f32);
        if out.iter().all(|q| (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2) >= md2) {
            out.push(p);
        }
    }
    out
}

/// Tracks one point from `from` to `to` (pyramids, finest first); `None` if lost
/// or if its window leaves the frame.
fn track_point(from: &[GrayImage], to: &[GrayImage], p: (f32, f32), r: i32, iters: usize) -> Option<(f32, f32)> {
    let top = from.len() - 1;
    let mut d = (0.0f32, 0.0f32);
    for l in (0..=top).rev() {
        let s = 1.0 / (1 << l) as f32;
        let (px, py) = (p.0 * s, p.1 * s);
        let (a, b) = (&from[l], &to[l]);
        let mut patch = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
        let (mut gxx, mut gxy, mut gyy) = (0.0f32, 0.0f32, 0.0f32);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (px + dx as f32, py + dy as f32);
                let gx = 0.5 * (a.sample(x + 1.0, y) - a.sample(x - 1.0, y));
                let gy = 0.5 * (a.sample(x, y + 1.0) - a.sample(x, y - 1.0));
                gxx += gx * gx;
                gxy += gx * gy;
                gyy += gy * gy;
                patch.push((x, y, a.sample(x, y), gx, gy));
            }
        }
        let det = gxx * gyy - gxy * gxy;
        let n = patch.len() as f32;
        if det / (n * n) < 1e-12 {
            return None;
        }
        for _ in 0..iters {
            let (mut bx, mut by) = (0.0f32, 0.0f32);
            for &(x, y, v, gx, gy) in &patch {
                let it = b.sample(x + d.0, y + d.1) - v;
                bx += gx * it;
                by += gy * it;
            }
            let du = -(gyy * bx - gxy * by) / det;
            let dv = -(gxx * by - gxy * bx) / det;
            d.0 += du;
            d.1 += dv;
            if du.abs() < 1e-3 && dv.abs() < 1e-3 {
                break;
            }
        }
        if l > 0 {
            d = (2.0 * d.0, 2.0 * d.1);
        }
    }
    let q = (p.0 + d.0, p.1 + d.1);
    let (w, h) = (from[0].width as f32, from[0].height as f32);
    let m = r as f32;
    if !(q.0.is_finite() && q.1.is_finite()) || q.0 < m || q.1 < m || q.0 > w - 1.0 - m || q.1 > h - 1.0 - m {
        return None;
    }
    Some(q)
}

/// Seeds corners on frame 0 and follows them through the video.
pub fn klt_track(video: &VideoVolume, params: &KltParams) -> TrackSet {
    if video.frames() == 0 {
        return TrackSet::default();
    }
    let grays: Vec<GrayImage> = (0..video.frames()).map(|t| video.gray_frame(t)).collect();
    let corners = good_features(&grays[0], params);
    let mut tracks: Vec<Track> = corners
        .into_iter()
        .map(|p| Track {
            start_frame: 0,
            positions: vec![p],
            alive: true,
        })
        .collect();
    let pyrs: Vec<Vec<GrayImage>> = grays.iter().map(|g| pyramid(g, params.levels, params.window)).collect();
    let r = (params.window / 2) as i32;
    for t in 1..video.frames() {
        for tr in tracks.iter_mut().filter(|t| t.alive) {
            let p = *tr.positions.last().unwrap();
            let next = track_point(&pyrs[t - 1], &pyrs[t], p, r, params.iters).and_then(|q| {
                let back = track_point(&pyrs[t], &pyrs[t - 1], q, r, params.iters)?;
                let fb = ((back.0 - p.0).powi(2) + (back.1 - p.1).powi(2)).sqrt();
                (fb <= params.fb_threshold).then_some(q)
            });
            match next {
                Some(q) => tr.positions.push(q),
                None => tr.alive = false,
            }
        }
    }
    TrackSet { tracks }
}

/// Mean second-difference magnitude over interior points of tracks with ≥ 3 positions.
pub fn track_smoothness(tracks: &TrackSet) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in &tracks.tracks {
        for w in t.positions.windows(3) {
            let ax = w[2].0 as f64 - 2.0 * w[1].0 as f64 + w[0].0 as f64;
            let ay = w[2].1 as f64 - 2.0 * w[1].1 as f64 + w[0].1 as f64;
            sum += (ax * ax + ay * ay).sqrt();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(xs: &[f32]) -> Track {
        Track {
            start_frame: 0,
            positions: xs.iter().map(|&x| (x, 5.0)).collect(),
            alive: true,
        }
    }

    #[test]
    fn smoothness_examples() {
        let lin = TrackSet {
            tracks: vec![track(&[0.0, 1.0, 2.0, 3.0])],
        };
        assert_eq!(track_smoothness(&lin), Some(0.0));
        let zig = TrackSet {
            tracks: vec![track(&[1.0, -1.0, 1.0, -1.0, 1.0])],
        };
        assert_eq!(track_smoothness(&zig), Some(4.0));
        let short = TrackSet {
            tracks: vec![track(&[0.0, 1.0])],
        };
        assert_eq!(track_smoothness(&short), None);
    }

    #[test]
    fn blank_video_has_no_tracks() {
        let v = VideoVolume::new(3, 20, 20, 1, vec![0.4; 1200]).unwrap();
        assert!(klt_track(&v, &KltParams::default()).tracks.is_empty());
    }

    #[test]
    fn corners_respect_spacing() {
        let v = crate::turbsim::static_scene(1, 48, 48, 5);
        let p = KltParams::default();
        let c = good_features(&v.gray_frame(0), &p);
        assert!(!c.is_empty() && c.len() <= p.max_corners);
        for (i, a) in c.iter().enumerate() {
            for b in &c[i + 1..] {
                assert!((a.0 - b.0).hypot(a.1 - b.1) >= p.min_distance);
            }
        }
    }
}
