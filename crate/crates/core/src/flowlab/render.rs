//! 8-bit visualisations of flow fields and histograms.

use super::FlowField;

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Hue encodes direction, saturation encodes magnitude relative to `max_mag`
/// (the field's own maximum when `None`).
pub fn flow_to_rgb(flow: &FlowField, max_mag: Option<f32>) -> Vec<u8> {
    let mags: Vec<f32> = flow.data.chunks_exact(2).map(|p| p[0].hypot(p[1])).collect();
    let m = max_mag.unwrap_or_else(|| mags.iter().copied().fold(0.0, f32::max)).max(1e-6);
    flow.data
        .chunks_exact(2)
        .zip(&mags)
        .flat_map(|(p, &mag)| {
            let hue = (p[1].atan2(p[0]) / std::f32::consts::TAU).rem_euclid(1.0);
            hsv_to_rgb(hue, (mag / m).min(1.0), 1.0)
        })
        .collect()
}

/// Bar chart of `counts`, `width × height` RGB, white background.
pub fn histogram_chart(counts: &[usize], width: usize, height: usize) -> Vec<u8> {
    let mut img = vec![255u8; width * height * 3];
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let n = counts.len().max(1);
    for (b, &c) in counts.iter().enumerate() {
        let x0 = b * width / n;
        let x1 = ((b + 1) * width / n).max(x0 + 1);
        let bar = c * (height - 1) / max;
        for x in x0..x1.min(width) {
            if x + 1 == x1 && x1 - x0 > 2 {
                continue;
            }
            for y in (height - bar)..height {
                let i = (y * width + x) * 3;
                img[i..i + 3].copy_from_slice(&[40, 90, 160]);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_white() {
        let rgb = flow_to_rgb(&FlowField::zeros(2, 2), None);
        assert!(rgb.iter().all(|&v| v == 255));
    }

    #[test]
    fn chart_dims() {
        let img = histogram_chart(&[1, 0, 4], 30, 10);
        assert_eq!(img.len(), 900);
        assert!(img.iter().any(|&v| v != 255));
    }
}
