//! Plane filters shared by the simulator and the flow code.
//!
//! Planes are interleaved `H×W×C` `f32` buffers; borders replicate the edge pixel.

/// Normalised Gaussian taps with radius `ceil(3σ)`; `[1]` for `σ ≤ 0`.
pub fn gaussian_taps(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma as f64 * sigma as f64)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| (v / s) as f32).collect()
}

/// Separable "same"-size filtering with an odd-length kernel along both axes.
pub fn separable_filter(data: &[f32], width: usize, height: usize, channels: usize, kernel: &[f32]) -> Vec<f32> {
    if kernel.len() == 1 && kernel[0] == 1.0 {
        return data.to_vec();
    }
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut s = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let xx = clampi(x as isize + k as isize - r, width);
                    s += w * data[(y * width + xx) * channels + c];
                }
                tmp[(y * width + x) * channels + c] = s;
            }
        }
    }
    let mut out = vec![0.0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut s = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let yy = clampi(y as isize + k as isize - r, height);
                    s += w * tmp[(yy * width + x) * channels + c];
                }
                out[(y * width + x) * channels + c] = s;
            }
        }
    }
    out
}

pub fn gaussian_blur(data: &[f32], width: usize, height: usize, channels: usize, sigma: f32) -> Vec<f32> {
    separable_filter(data, width, height, channels, &gaussian_taps(sigma))
}

/// Mean over a `(2r+1)²` window of a single-channel plane, via running sums.
pub fn box_filter(data: &[f32], width: usize, height: usize, r: usize) -> Vec<f32> {
    let k = 2 * r + 1;
    let norm = 1.0 / (k * k) as f32;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        let mut s: f32 = (-(r as isize)..=r as isize).map(|d| row[clampi(d, width)]).sum();
        for x in 0..width {
            tmp[y * width + x] = s;
            s += row[clampi(x as isize + r as isize + 1, width)] - row[clampi(x as isize - r as isize, width)];
        }
    }
    let mut out = vec![0.0f32; data.len()];
    for x in 0..width {
        let at = |y: isize| tmp[clampi(y, height) * width + x];
        let mut s: f32 = (-(r as isize)..=r as isize).map(at).sum();
        for y in 0..height {
            out[y * width + x] = s * norm;
            s += at(y as isize + r as isize + 1) - at(y as isize - r as isize);
        }
    }
    out
}

/// Central-difference gradients `(∂/∂x, ∂/∂y)` of a single-channel plane.
pub fn gradients(data: &[f32], width: usize, height: usize) -> (Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; data.len()];
    let mut gy = vec![0.0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(width - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(height - 1));
            let i = y * width + x;
            if xr > xl {
                gx[i] = (data[y * width + xr] - data[y * width + xl]) / (xr - xl) as f32;
            }
            if yd > yu {
                gy[i] = (data[yd * width + x] - data[yu * width + x]) / (yd - yu) as f32;
            }
        }
    }
    (gx, gy)
}

/// Blurs with a 5-tap binomial kernel and keeps every second pixel.
pub fn pyr_down(data: &[f32], width: usize, height: usize) -> (Vec<f32>, usize, usize) {
    let k = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let b = separable_filter(data, width, height, 1, &k);
    let (w2, h2) = (width.div_ceil(2), height.div_ceil(2));
    let mut out = Vec::with_capacity(w2 * h2);
    for y in 0..h2 {
        for x in 0..w2 {
            out.push(b[(2 * y) * width + 2 * x]);
        }
    }
    (out, w2, h2)
}
