//! Parametric turbulence simulator.
//!
//! Tilt is a smoothed Gaussian random field per displacement component,
//! rescaled to a target RMS and chained over time by an AR(1) recursion.
//! Degradation backward-warps each clean frame by its tilt, then blurs.
//! The model is purely 2-D: displacement does not depend on scene depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::imgproc::{gaussian_blur, gaussian_taps, separable_filter};
use crate::io::{sample_plane, VideoVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurbulenceParams {
    /// RMS tilt in pixels.
    pub strength: f32,
    /// Spatial correlation length of the tilt, pixels.
    pub smooth_sigma: f32,
    /// AR(1) coefficient between consecutive frames.
    pub temporal_corr: f32,
    pub blur_sigma: f32,
    pub seed: u64,
}

impl Default for TurbulenceParams {
    fn default() -> Self {
        Self {
            strength: 1.5,
            smooth_sigma: 8.0,
            temporal_corr: 0.9,
            blur_sigma: 1.0,
            seed: 0,
        }
    }
}

impl TurbulenceParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.strength >= 0.0) {
            return Err(format!("strength must be ≥ 0, got {}", self.strength));
        }
        if !(0.0..=1.0).contains(&self.temporal_corr) {
            return Err(format!("temporal_corr must be in [0, 1], got {}", self.temporal_corr));
        }
        if !(self.blur_sigma >= 0.0) || !(self.smooth_sigma >= 0.0) {
            return Err("blur_sigma and smooth_sigma must be ≥ 0".into());
        }
        Ok(())
    }
}

/// Per-frame displacement `T×2×H×W` (x component plane, then y).
#[derive(Clone, Debug, PartialEq)]
pub struct TiltFields {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl TiltFields {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * 2 * height * width],
        }
    }

    pub fn plane(&self, t: usize, component: usize) -> &[f32] {
        let n = self.height * self.width;
        let o = (2 * t + component) * n;
        &self.data[o..o + n]
    }

    pub fn plane_mut(&mut self, t: usize, component: usize) -> &mut [f32] {
        let n = self.height * self.width;
        let o = (2 * t + component) * n;
        &mut self.data[o..o + n]
    }

    /// Constant displacement in every frame.
    pub fn constant(frames: usize, height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let mut f = Self::zeros(frames, height, width);
        for t in 0..frames {
            f.plane_mut(t, 0).fill(dx);
            f.plane_mut(t, 1).fill(dy);
        }
        f
    }

    pub fn rms(&self) -> f64 {
        (self.data.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / self.data.len().max(1) as f64).sqrt()
    }
}

/// Clean, degraded and the tilts that map one to the other.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthPack {
    pub clean: VideoVolume,
    pub degraded: VideoVolume,
    pub tilts: TiltFields,
    pub blur_sigma: f32,
}

fn smooth_unit_field(rng: &mut ChaCha8Rng, h: usize, w: usize, taps: &[f32]) -> Vec<f32> {
    let noise: Vec<f32> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut f = separable_filter(&noise, w, h, 1, taps);
    let mean = f.iter().map(|&v| v as f64).sum::<f64>() / f.len() as f64;
    let rms = (f.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    let s = if rms > 0.0 { 1.0 / rms } else { 0.0 };
    f.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * s) as f32);
    f
}

/// Tilt fields whose innovations are unit-RMS smoothed noise scaled by `strength`.
pub fn gen_tilt_fields(params: &TurbulenceParams, frames: usize, height: usize, width: usize) -> TiltFields {
    let mut out = TiltFields::zeros(frames, height, width);
    if params.strength == 0.0 || frames == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let taps = gaussian_taps(params.smooth_sigma);
    let c = params.temporal_corr;
    let keep = (1.0 - c * c).max(0.0).sqrt();
    for comp in 0..2 {
        let mut prev = smooth_unit_field(&mut rng, height, width, &taps);
        prev.iter_mut().for_each(|v| *v *= params.strength);
        out.plane_mut(0, comp).copy_from_slice(&prev);
        for t in 1..frames {
            if keep > 0.0 {
                let innov = smooth_unit_field(&mut rng, height, width, &taps);
                for (p, i) in prev.iter_mut().zip(&innov) {
                    *p = c * *p + keep * params.strength * i;
                }
            }
            out.plane_mut(t, comp).copy_from_slice(&prev);
        }
    }
    out
}

/// Backward warp (`out(x, y) = in(x + dx, y + dy)`), blur, clamp.
pub fn apply_degradation(clean: &VideoVolume, tilts: &TiltFields, blur_sigma: f32) -> VideoVolume {
    let [t_n, h, w, c] = clean.dims();
    assert_eq!((tilts.frames, tilts.height, tilts.width), (t_n, h, w), "tilt dims must match the video");
    let mut out = VideoVolume::zeros(t_n, h, w, c);
    for t in 0..t_n {
        let src = clean.frame(t);
        let (dx, dy) = (tilts.plane(t, 0), tilts.plane(t, 1));
        let mut warped = vec![0.0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sx, sy) = (x as f32 + dx[i], y as f32 + dy[i]);
                for ch in 0..c {
                    warped[i * c + ch] = sample_plane(src, w, h, c, ch, sx, sy);
                }
            }
        }
        let mut blurred = if blur_sigma > 0.0 { gaussian_blur(&warped, w, h, c, blur_sigma) } else { warped };
        blurred.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out.frame_mut(t).copy_from_slice(&blurred);
    }
    out
}

pub fn degrade(clean: &VideoVolume, params: &TurbulenceParams) -> GroundTruthPack {
    let [t, h, w, _] = clean.dims();
    let tilts = gen_tilt_fields(params, t, h, w);
    let degraded = apply_degradation(clean, &tilts, params.blur_sigma);
    GroundTruthPack {
        clean: clean.clone(),
        degraded,
        tilts,
        blur_sigma: params.blur_sigma,
    }
}

/// Static colour scene: smooth multi-scale texture with a few flat rectangles.
///
/// The rectangles give the corner detector strong features; the texture
/// gives the flow solver gradients everywhere else.
pub fn texture_image(height: usize, width: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f32; height * width * 3];
    for (sigma, amp) in [(4.0f32, 0.22f32), (1.5, 0.08)] {
        let taps = gaussian_taps(sigma);
        for ch in 0..3 {
            let f = smooth_unit_field(&mut rng, height, width, &taps);
            for (i, v) in f.iter().enumerate() {
                img[i * 3 + ch] += amp * v;
            }
        }
    }
    img.iter_mut().for_each(|v| *v += 0.5);
    let pos_x = Uniform::new(0, width.max(2) * 3 / 4).unwrap();
    let pos_y = Uniform::new(0, height.max(2) * 3 / 4).unwrap();
    let size = Uniform::new(height.max(8) / 8, height.max(8) / 4 + 1).unwrap();
    let level = Uniform::new(0.05f32, 0.95).unwrap();
    for _ in 0..6 {
        let (x0, y0) = (pos_x.sample(&mut rng), pos_y.sample(&mut rng));
        let (rw, rh) = (size.sample(&mut rng), size.sample(&mut rng));
        let col = [level.sample(&mut rng), level.sample(&mut rng), level.sample(&mut rng)];
        for y in y0..(y0 + rh).min(height) {
            for x in x0..(x0 + rw).min(width) {
                for ch in 0..3 {
                    img[(y * width + x) * 3 + ch] = col[ch];
                }
            }
        }
    }
    let mut img = gaussian_blur(&img, width, height, 3, 0.7);
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// `frames` identical copies of [`texture_image`].
pub fn static_scene(frames: usize, height: usize, width: usize, seed: u64) -> VideoVolume {
    let img = texture_image(height, width, seed);
    VideoVolume::from_frames(height, width, 3, &vec![img; frames]).expect("consistent dims")
}

/// Texture moving by `(vx, vy)` pixels per frame (content at `x` in frame `t`
/// comes from `x − t·v` in frame 0), drawn from a larger canvas to avoid borders.
pub fn translating_scene(frames: usize, height: usize, width: usize, vx: f32, vy: f32, seed: u64) -> VideoVolume {
    let pad_x = (vx.abs() * frames as f32).ceil() as usize + 4;
    let pad_y = (vy.abs() * frames as f32).ceil() as usize + 4;
    let (cw, ch) = (width + 2 * pad_x, height + 2 * pad_y);
    let canvas = texture_image(ch, cw, seed);
    let mut out = VideoVolume::zeros(frames, height, width, 3);
    for t in 0..frames {
        let f = out.frame_mut(t);
        for y in 0..height {
            for x in 0..width {
                let sx = x as f32 + pad_x as f32 - t as f32 * vx;
                let sy = y as f32 + pad_y as f32 - t as f32 * vy;
                for c in 0..3 {
                    f[(y * width + x) * 3 + c] = sample_plane(&canvas, cw, ch, 3, c, sx, sy);
                }
            }
        }
    }
    out
}

/// The synthetic benchmark: a static textured scene and its degraded version.
pub fn default_synthetic(frames: usize, height: usize, width: usize, scene_seed: u64, params: &TurbulenceParams) -> GroundTruthPack {
    degrade(&static_scene(frames, height, width, scene_seed), params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strength_and_blur_is_identity() {
        let clean = static_scene(3, 16, 20, 1);
        let p = TurbulenceParams {
            strength: 0.0,
            blur_sigma: 0.0,
            ..Default::default()
        };
        let pack = degrade(&clean, &p);
        assert!(pack.tilts.data.iter().all(|&v| v == 0.0));
        assert_eq!(pack.degraded, clean);
    }

    #[test]
    fn full_correlation_freezes_tilt() {
        let p = TurbulenceParams {
            temporal_corr: 1.0,
            ..Default::default()
        };
        let f = gen_tilt_fields(&p, 4, 32, 32);
        for t in 1..4 {
            assert_eq!(f.plane(t, 0), f.plane(0, 0));
            assert_eq!(f.plane(t, 1), f.plane(0, 1));
        }
    }

    #[test]
    fn uncorrelated_statistics() {
        let p = TurbulenceParams {
            temporal_corr: 0.0,
            strength: 1.2,
            smooth_sigma: 2.0,
            seed: 9,
            ..Default::default()
        };
        let f = gen_tilt_fields(&p, 64, 32, 32);
        assert!((f.rms() / 1.2 - 1.0).abs() < 0.1, "rms {}", f.rms());
        let n = 32 * 32;
        let mut lag = 0.0f64;
        let mut var = 0.0f64;
        for comp in 0..2 {
            for i in 0..n {
                for t in 0..63 {
                    lag += (f.plane(t, comp)[i] * f.plane(t + 1, comp)[i]) as f64;
                }
                for t in 0..64 {
                    var += (f.plane(t, comp)[i] as f64).powi(2);
                }
            }
        }
        let ac = (lag / 63.0) / (var / 64.0);
        assert!(ac.abs() < 0.15, "lag-1 autocorrelation {ac}");
    }

    #[test]
    fn integer_shift_moves_interior() {
        let (h, w) = (12, 16);
        // periodic stripes of period 4
        let frame: Vec<f32> = (0..h * w).map(|i| ((i % w) % 4) as f32 / 3.0).collect();
        let clean = VideoVolume::from_frames(h, w, 1, &[frame]).unwrap();
        let out = apply_degradation(&clean, &TiltFields::constant(1, h, w, 2.0, 0.0), 0.0);
        for y in 0..h {
            for x in 0..w - 2 {
                assert_eq!(out.at(0, y, x, 0), clean.at(0, y, x + 2, 0));
            }
        }
    }

    #[test]
    fn stored_tilts_reproduce_degraded() {
        let clean = static_scene(3, 24, 24, 2);
        let pack = degrade(&clean, &TurbulenceParams::default());
        assert_eq!(apply_degradation(&clean, &pack.tilts, pack.blur_sigma), pack.degraded);
        assert!(pack.degraded.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(pack, degrade(&clean, &TurbulenceParams::default()));
    }

    #[test]
    fn invalid_params_rejected() {
        let p = TurbulenceParams {
            temporal_corr: 1.5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
