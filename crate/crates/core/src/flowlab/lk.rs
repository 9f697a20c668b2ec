//! Dense coarse-to-fine Lucas–Kanade.

use serde::{Deserialize, Serialize};

use super::FlowField;
use crate::imgproc::{box_filter, gradients, pyr_down};
use crate::io::GrayImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub levels: usize,
    /// Odd window side length.
    pub window: usize,
    pub iters: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 21,
            iters: 30,
        }
    }
}

/// Tikhonov term on the normal equations, relative to the mean gradient energy of the level.
const RIDGE_REL: f32 = 1e-2;
/// Largest per-iteration update, pixels.
const MAX_STEP: f32 = 1.0;

/// Gaussian pyramid, finest first; stops before a level would be narrower than `min_size`.
pub(crate) fn pyramid(img: &GrayImage, levels: usize, min_size: usize) -> Vec<GrayImage> {
    let mut out = vec![img.clone()];
    for _ in 1..levels.max(1) {
        let last = out.last().unwrap();
        if last.width.div_ceil(2) < min_size.max(4) || last.height.div_ceil(2) < min_size.max(4) {
            break;
        }
        let (d, w, h) = pyr_down(&last.data, last.width, last.height);
        out.push(GrayImage::new(w, h, d));
    }
    out
}

fn upsample_flow(flow: &FlowField, width: usize, height: usize) -> FlowField {
    let mut out = FlowField::zeros(width, height);
    let sx = flow.width as f32 / width as f32;
    let sy = flow.height as f32 / height as f32;
    for y in 0..height {
        for x in 0..width {
            // pixel centres of the coarse grid
            let cx = (x as f32 + 0.5) * sx - 0.5;
            let cy = (y as f32 + 0.5) * sy - 0.5;
            let (u, v) = flow.sample(cx, cy);
            out.set(x, y, 2.0 * u, 2.0 * v);
        }
    }
    out
}

fn refine(f1: &GrayImage, f2: &GrayImage, flow: &mut FlowField, r: usize, iters: usize) {
    let (w, h) = (f1.width, f1.height);
    let (g1x, g1y) = gradients(&f1.data, w, h);
    let (g2x, g2y) = gradients(&f2.data, w, h);
    let (g2x, g2y) = (GrayImage::new(w, h, g2x), GrayImage::new(w, h, g2y));
    let n = w * h;
    let (mut warped, mut wgx, mut wgy) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    let mut inside = vec![true; n];
    for _ in 0..iters {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.at(x, y);
                let (sx, sy) = (x as f32 + u, y as f32 + v);
                let i = y * w + x;
                inside[i] = sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f32 && sy <= (h - 1) as f32;
                warped[i] = f2.sample(sx, sy);
                wgx[i] = g2x.sample(sx, sy);
                wgy[i] = g2y.sample(sx, sy);
            }
        }
        let (mut ixx, mut ixy, mut iyy, mut ixt, mut iyt) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            // samples that left the frame carry no information
            if !inside[i] {
                continue;
            }
            let gx = 0.5 * (g1x[i] + wgx[i]);
            let gy = 0.5 * (g1y[i] + wgy[i]);
            let it = warped[i] - f1.data[i];
            ixx[i] = gx * gx;
            ixy[i] = gx * gy;
            iyy[i] = gy * gy;
            ixt[i] = gx * it;
            iyt[i] = gy * it;
        }
        let (axx, axy, ayy) = (box_filter(&ixx, w, h, r), box_filter(&ixy, w, h, r), box_filter(&iyy, w, h, r));
        let (bx, by) = (box_filter(&ixt, w, h, r), box_filter(&iyt, w, h, r));
        let energy = axx.iter().zip(&ayy).map(|(a, d)| (a + d) as f64).sum::<f64>() / n as f64;
        let ridge = RIDGE_REL * energy as f32 + 1e-12;
        let (mut ux, mut uy) = (vec![0.0f32; n], vec![0.0f32; n]);
        for i in 0..n {
            let (a, b, d) = (axx[i] + ridge, axy[i], ayy[i] + ridge);
            let det = a * d - b * b;
            if det <= 0.0 || !det.is_finite() {
                continue;
            }
            let du = -(d * bx[i] - b * by[i]) / det;
            let dv = -(a * by[i] - b * bx[i]) / det;
            let step = du.hypot(dv);
            if step.is_finite() {
                let s = if step > MAX_STEP { MAX_STEP / step } else { 1.0 };
                ux[i] = du * s;
                uy[i] = dv * s;
            }
        }
        // window-consistent update: the normal equations assume constant flow per window
        let (ux, uy) = (box_filter(&ux, w, h, r), box_filter(&uy, w, h, r));
        let mut change = 0.0f32;
        for i in 0..n {
            flow.data[2 * i] += ux[i];
            flow.data[2 * i + 1] += uy[i];
            change = change.max(ux[i].abs()).max(uy[i].abs());
        }
        if change < 1e-5 {
            break;
        }
    }
}

/// Flow from `f1` to `f2`: `f1(x) ≈ f2(x + flow(x))`.
pub fn lk_flow(f1: &GrayImage, f2: &GrayImage, params: &FlowParams) -> FlowField {
    assert_eq!((f1.width, f1.height), (f2.width, f2.height), "frames must have equal size");
    let p1 = pyramid(f1, params.levels, params.window);
    let p2 = pyramid(f2, params.levels, params.window);
    let r = params.window / 2;
    let top = p1.len() - 1;
    let mut flow = FlowField::zeros(p1[top].width, p1[top].height);
    for l in (0..=top).rev() {
        if l < top {
            flow = upsample_flow(&flow, p1[l].width, p1[l].height);
        }
        refine(&p1[l], &p2[l], &mut flow, r, params.iters);
    }
    flow
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images_give_zero_flow() {
        let a = GrayImage::new(16, 16, vec![0.3; 256]);
        let f = lk_flow(&a, &a, &FlowParams::default());
        assert!(f.data.iter().all(|&v| v == 0.0));
        let b = GrayImage::new(16, 16, vec![0.7; 256]);
        let f = lk_flow(&a, &b, &FlowParams::default());
        assert!(f.data.iter().all(|v| v.is_finite() && v.abs() < 1e-3));
    }

    #[test]
    fn upsampling_doubles_constant_flow() {
        let f = FlowField::constant(4, 4, 0.5, -0.25);
        let up = upsample_flow(&f, 8, 8);
        assert!(up.data.chunks_exact(2).all(|p| p == [1.0, -0.5]));
    }
}
