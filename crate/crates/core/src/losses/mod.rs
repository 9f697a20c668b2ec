//! Reconstruction, temporal and oracle-backed objectives.

mod disparity;

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, Scalar, Tensor, Var};
use crate::fields::{BoundModel, ConvrtModel, FieldError, FrameVars, WarpMap};
use crate::oracle::{ImageView, OracleSlot};

pub use disparity::{load_disparity, DisparityMap};

/// SSIM window size and Gaussian width.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("frame {height}×{width} is smaller than the {window}×{window} SSIM window")]
    FrameTooSmall { height: usize, width: usize, window: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_ssim: f64,
    pub lambda_lpips: f64,
    pub lambda_temp: f64,
    pub lambda_text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            lambda_ssim: 0.2,
            lambda_lpips: 0.5,
            lambda_temp: 0.05,
            lambda_text: 0.01,
        }
    }
}

impl LossWeights {
    pub fn mse_only() -> Self {
        Self {
            lambda_mse: 1.0,
            lambda_ssim: 0.0,
            lambda_lpips: 0.0,
            lambda_temp: 0.0,
            lambda_text: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            ("lambda_mse", self.lambda_mse),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_temp", self.lambda_temp),
            ("lambda_text", self.lambda_text),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LossError::InvalidWeights(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one evaluation; `total` is the weighted sum of the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub temp: f64,
    pub text: f64,
}

impl LossBreakdown {
    pub fn from_components(w: &LossWeights, mse: f64, ssim: f64, lpips: f64, temp: f64, text: f64) -> Self {
        let total = w.lambda_mse * mse + w.lambda_ssim * ssim + w.lambda_lpips * lpips + w.lambda_temp * temp + w.lambda_text * text;
        Self {
            total,
            mse,
            ssim,
            lpips,
            temp,
            text,
        }
    }

    /// `total − Σ λᵢ·componentᵢ`.
    pub fn residual(&self, w: &LossWeights) -> f64 {
        self.total - Self::from_components(w, self.mse, self.ssim, self.lpips, self.temp, self.text).total
    }

    /// Componentwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = Self::default();
        for b in items {
            m.total += b.total / n;
            m.mse += b.mse / n;
            m.ssim += b.ssim / n;
            m.lpips += b.lpips / n;
            m.temp += b.temp / n;
            m.text += b.text / n;
        }
        m
    }

    /// Names and values of every component, total first.
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("total", self.total),
            ("mse", self.mse),
            ("ssim", self.ssim),
            ("lpips", self.lpips),
            ("temp", self.temp),
            ("text", self.text),
        ]
    }
}

/// Normalised 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / s).collect()
}

/// Mean squared error of two same-shaped nodes.
pub fn mse_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var, LossError> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.reduce_mean(sq))
}

/// `1 − mean SSIM` of two `H×W×C` nodes (any shape with `H·W·C` elements is reshaped).
pub fn ssim_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, dims: [usize; 3]) -> Result<Var, LossError> {
    let [h, w, _] = dims;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LossError::FrameTooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let x = g.reshape(pred, &dims)?;
    let y = g.reshape(target, &dims)?;
    let k: Vec<T> = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::lit).collect();
    let mx = g.filter_valid(x, &k)?;
    let my = g.filter_valid(y, &k)?;
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.hadamard(x, y)?;
    let fxx = g.filter_valid(xx, &k)?;
    let fyy = g.filter_valid(yy, &k)?;
    let fxy = g.filter_valid(xy, &k)?;
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxy = g.hadamard(mx, my)?;
    let sxx = g.sub(fxx, mx2)?;
    let syy = g.sub(fyy, my2)?;
    let sxy = g.sub(fxy, mxy)?;

    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let a1 = g.affine(mxy, two, c1);
    let a2 = g.affine(sxy, two, c2);
    let num = g.hadamard(a1, a2)?;
    let msum = g.add(mx2, my2)?;
    let b1 = g.affine(msum, T::one(), c1);
    let ssum = g.add(sxx, syy)?;
    let b2 = g.affine(ssum, T::one(), c2);
    let den = g.hadamard(b1, b2)?;
    let map = g.div(num, den)?;
    let m = g.reduce_mean(map);
    Ok(g.affine(m, -T::one(), T::one()))
}

/// Mean over pixels of `weight · (|Δx| + |Δy|)` for a warp node of shape `N×2`,
/// where `weight = 1 − disparity`.
pub fn temporal_graph<T: Scalar>(g: &mut Graph<T>, warp: Var, far_weight: &[T]) -> Result<Var, LossError> {
    let n = far_weight.len();
    if g.shape(warp) != [n, 2] {
        return Err(LossError::Shape(format!(
            "warp has shape {:?}, disparity has {n} pixels",
            g.shape(warp)
        )));
    }
    let w: Vec<T> = far_weight.iter().flat_map(|&v| [v, v]).collect();
    let wv = g.input(Tensor::new(vec![n, 2], w)?);
    let a = g.abs(warp);
    let prod = g.hadamard(a, wv)?;
    let s = g.reduce_sum(prod);
    Ok(g.affine(s, T::one() / T::from_usize(n.max(1)).unwrap(), T::zero()))
}

fn check_same(a: usize, b: usize, what: &str) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::Shape(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

pub fn mse_loss(pred: &[f32], target: &[f32]) -> Result<f64, LossError> {
    check_same(pred.len(), target.len(), "mse")?;
    if pred.is_empty() {
        return Err(LossError::Shape("mse of empty frames".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64)
}

/// `1 − mean SSIM` of two `H×W×C` frames, evaluated in 64-bit precision.
pub fn ssim_loss(pred: &[f32], target: &[f32], dims: [usize; 3]) -> Result<f64, LossError> {
    let n: usize = dims.iter().product();
    check_same(pred.len(), n, "ssim prediction")?;
    check_same(target.len(), n, "ssim target")?;
    let mut g = Graph::<f64>::new();
    let to = |v: &[f32]| Tensor::new(dims.to_vec(), v.iter().map(|&x| x as f64).collect());
    let p = g.input(to(pred)?);
    let t = g.input(to(target)?);
    let l = ssim_graph(&mut g, p, t, dims)?;
    Ok(g.scalar_value(l))
}

pub fn temporal_loss(warp: &WarpMap, disparity: &[f32]) -> Result<f64, LossError> {
    let n = warp.height * warp.width;
    check_same(disparity.len(), n, "temporal loss disparity")?;
    let (dx, dy) = (warp.dx(), warp.dy());
    Ok((0..n)
        .map(|i| (1.0 - disparity[i] as f64) * (dx[i].abs() as f64 + dy[i].abs() as f64))
        .sum::<f64>()
        / n as f64)
}

/// Semantic term and its pixel-gradient from the attached oracle, if any.
pub fn semantic_loss(frame: &[f64], dims: [usize; 3], oracles: &mut OracleSlot) -> Option<(f64, Vec<f64>)> {
    let out = oracles.semantic(&ImageView::new(dims, frame))?;
    Some((out.loss, out.grad))
}

/// Perceptual distance to `reference` and its pixel-gradient, if an oracle is attached.
pub fn perceptual_loss(frame: &[f64], reference: &[f64], dims: [usize; 3], oracles: &mut OracleSlot) -> Option<(f64, Vec<f64>)> {
    let out = oracles.perceptual(&ImageView::new(dims, frame), &ImageView::new(dims, reference))?;
    Some((out.loss, out.grad))
}

/// Inputs shared by every frame evaluated against one model.
pub struct FrameTarget<'a, T> {
    pub frame: usize,
    /// `H·W·C` supervision values.
    pub supervision: &'a [T],
    /// `H·W` values of `1 − disparity`.
    pub far_weight: &'a [T],
}

/// Builds the weighted objective of one frame on `g` and returns it with its breakdown.
///
/// Terms with zero weight are skipped entirely; oracle terms are skipped when
/// no oracle is attached or it has been disabled.
pub fn frame_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &ConvrtModel<T>,
    bound: &BoundModel,
    target: &FrameTarget<'_, T>,
    weights: &LossWeights,
    oracles: &mut OracleSlot,
) -> Result<(Var, LossBreakdown, FrameVars), LossError> {
    let c = &model.config;
    let dims = [c.height, c.width, c.channels];
    let n = c.pixels() * c.channels;
    check_same(target.supervision.len(), n, "supervision frame")?;
    check_same(target.far_weight.len(), c.pixels(), "disparity")?;

    let fv = model.render_frame_graph(g, bound, target.frame)?;
    let sup = g.input(Tensor::new(vec![c.pixels(), c.channels], target.supervision.to_vec())?);
    let mut terms: Vec<(Var, T)> = Vec::new();
    let val = |g: &Graph<T>, v: Var| g.scalar_value(v).to_f64().unwrap();
    let (mut mse, mut ssim, mut lpips, mut temp, mut text) = (0.0, 0.0, 0.0, 0.0, 0.0);

    if weights.lambda_mse > 0.0 {
        let v = mse_graph(g, fv.rgb, sup)?;
        mse = val(g, v);
        terms.push((v, T::lit(weights.lambda_mse)));
    }
    if weights.lambda_ssim > 0.0 {
        let v = ssim_graph(g, fv.rgb, sup, dims)?;
        ssim = val(g, v);
        terms.push((v, T::lit(weights.lambda_ssim)));
    }
    if weights.lambda_temp > 0.0 {
        let v = temporal_graph(g, fv.warp, target.far_weight)?;
        temp = val(g, v);
        terms.push((v, T::lit(weights.lambda_temp)));
    }
    let needs_oracle = (weights.lambda_lpips > 0.0 && oracles.has_perceptual()) || (weights.lambda_text > 0.0 && oracles.has_semantic());
    if needs_oracle {
        let pixels: Vec<f64> = g.value(fv.rgb).data().iter().map(|v| v.to_f64().unwrap()).collect();
        let to_t = |grad: Vec<f64>| grad.into_iter().map(T::lit).collect::<Vec<T>>();
        if weights.lambda_lpips > 0.0 {
            let reference: Vec<f64> = target.supervision.iter().map(|v| v.to_f64().unwrap()).collect();
            if let Some((loss, grad)) = perceptual_loss(&pixels, &reference, dims, oracles) {
                let v = g.external(fv.rgb, T::lit(loss), to_t(grad))?;
                lpips = loss;
                terms.push((v, T::lit(weights.lambda_lpips)));
            }
        }
        if weights.lambda_text > 0.0 {
            if let Some((loss, grad)) = semantic_loss(&pixels, dims, oracles) {
                let v = g.external(fv.rgb, T::lit(loss), to_t(grad))?;
                text = loss;
                terms.push((v, T::lit(weights.lambda_text)));
            }
        }
    }
    let total = g.weighted_sum(&terms)?;
    Ok((total, LossBreakdown::from_components(weights, mse, ssim, lpips, temp, text), fv))
}

/// Evaluates every term for frame `t` of a frozen model.
pub fn total_loss(
    model: &ConvrtModel<f32>,
    t: usize,
    supervision: &[f32],
    disparity: &[f32],
    weights: &LossWeights,
    oracles: &mut OracleSlot,
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let far: Vec<f32> = disparity.iter().map(|d| 1.0 - d).collect();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let target = FrameTarget {
        frame: t,
        supervision,
        far_weight: &far,
    };
    let (_, b, _) = frame_loss_graph(&mut g, model, &bound, &target, weights, oracles)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ModelOptions;

    fn ramp(n: usize, seed: u32) -> Vec<f32> {
        (0..n).map(|i| (((i as u32).wrapping_mul(2654435761u32) ^ seed) % 997) as f32 / 996.0).collect()
    }

    #[test]
    fn mse_examples() {
        let a = ramp(48, 1);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0; 12], &[0.5; 12]).unwrap(), 0.25);
        assert!(matches!(mse_loss(&[0.0; 3], &[0.0; 4]), Err(LossError::Shape(_))));
    }

    #[test]
    fn ssim_examples() {
        let dims = [12, 13, 3];
        let a = ramp(12 * 13 * 3, 7);
        assert!(ssim_loss(&a, &a, dims).unwrap().abs() < 1e-12);
        let zeros = vec![0.0; 12 * 13 * 3];
        let ones = vec![1.0; 12 * 13 * 3];
        // constant frames: mean term C1 / (1 + C1), variance term 1
        let expect = 1.0 - SSIM_C1 / (1.0 + SSIM_C1);
        let got = ssim_loss(&zeros, &ones, dims).unwrap();
        assert!((got - expect).abs() < 1e-9 && (got - 1.0).abs() < 0.01, "{got}");
        assert!(matches!(
            ssim_loss(&vec![0.0; 10 * 20], &vec![0.0; 10 * 20], [10, 20, 1]),
            Err(LossError::FrameTooSmall { .. })
        ));
    }

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(k[i], k[10 - i]);
        }
    }

    fn warp(h: usize, w: usize, dx: f32, dy: f32) -> WarpMap {
        let n = h * w;
        let mut data = vec![dx; n];
        data.extend(std::iter::repeat_n(dy, n));
        WarpMap {
            frame: 0,
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn temporal_examples() {
        let d = vec![0.3; 20];
        assert_eq!(temporal_loss(&warp(4, 5, 0.0, 0.0), &d).unwrap(), 0.0);
        assert_eq!(temporal_loss(&warp(4, 5, 1.3, -0.4), &[1.0; 20]).unwrap(), 0.0);
        let v = temporal_loss(&warp(4, 5, 0.1, 0.0), &[0.25; 20]).unwrap();
        assert!((v - 0.075).abs() < 1e-7, "{v}");
        let one = temporal_loss(&warp(4, 5, 0.2, -0.1), &d).unwrap();
        let three = temporal_loss(&warp(4, 5, 0.6, -0.3), &d).unwrap();
        assert!((three - 3.0 * one).abs() < 1e-7);
    }

    #[test]
    fn breakdown_identity_and_isolation() {
        let opts = ModelOptions {
            deform_channels: 4,
            content_channels: 4,
            hidden_channels: 4,
            deform_width: 8,
            content_width: 8,
            ..Default::default()
        };
        let m = ConvrtModel::<f32>::init(&opts.resolve(2, 12, 12, 3, 3)).unwrap();
        let sup = ramp(12 * 12 * 3, 5);
        let disp = vec![0.5; 144];
        let mut none = OracleSlot::none();
        let w = LossWeights::default();
        let b = total_loss(&m, 1, &sup, &disp, &w, &mut none).unwrap();
        assert!(b.residual(&w).abs() < 1e-12);
        assert_eq!((b.lpips, b.text), (0.0, 0.0));
        let only = total_loss(&m, 1, &sup, &disp, &LossWeights::mse_only(), &mut none).unwrap();
        assert_eq!(only.total, only.mse);
        assert_eq!(only.mse, b.mse);
        let no_ssim = LossWeights { lambda_ssim: 0.0, ..w };
        let c = total_loss(&m, 1, &sup, &disp, &no_ssim, &mut none).unwrap();
        assert_eq!((c.mse, c.temp), (b.mse, b.temp));
        let direct = mse_loss(&m.render_frame(1).unwrap(), &sup).unwrap();
        assert!((direct - b.mse).abs() < 1e-6);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            lambda_temp: -1.0,
            ..Default::default()
        };
        assert!(matches!(w.validate(), Err(LossError::InvalidWeights(_))));
    }
}
