//! Dual-field video model.
//!
//! The deformation field stores a spatial feature grid `M` (`Q×Gh×Gw`) and a
//! temporal feature table `u` (`Q×T`). The feature at pixel `(x, y)` of frame
//! `t` is the elementwise product `M(x, y) ⊙ u_t`; a layer-normalised MLP maps
//! it to a bounded warp and `K` hidden channels. The content field samples its
//! own canonical grid at the warped coordinates, concatenates the hidden
//! channels and renders colour through a sigmoid MLP.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, Scalar, Tensor, Var};
use crate::io::VideoVolume;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("frame index {t} out of range for {frames} frames")]
    FrameOutOfRange { t: usize, frames: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// User-facing model options; frame dimensions come from the video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub deform_channels: usize,
    pub content_channels: usize,
    pub hidden_channels: usize,
    /// Integer factor between frame size and the deformation grid.
    pub deform_grid_downscale: usize,
    /// Integer factor between frame size and the content grid.
    pub content_grid_downscale: usize,
    pub deform_width: usize,
    pub deform_depth: usize,
    pub content_width: usize,
    pub content_depth: usize,
    /// Warp bound in pixels.
    pub max_disp: f32,
    pub leaky_slope: f32,
    pub layer_norm_eps: f32,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            deform_channels: 16,
            content_channels: 16,
            hidden_channels: 16,
            deform_grid_downscale: 1,
            content_grid_downscale: 1,
            deform_width: 64,
            deform_depth: 2,
            content_width: 64,
            content_depth: 2,
            max_disp: 3.0,
            leaky_slope: crate::diffcore::LEAKY_SLOPE as f32,
            layer_norm_eps: 1e-5,
        }
    }
}

fn downscaled(size: usize, factor: usize) -> usize {
    size.div_ceil(factor.max(1)).max(1)
}

impl ModelOptions {
    pub fn resolve(&self, frames: usize, height: usize, width: usize, channels: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            frames,
            height,
            width,
            channels,
            deform_grid: [
                downscaled(height, self.deform_grid_downscale),
                downscaled(width, self.deform_grid_downscale),
            ],
            content_grid: [
                downscaled(height, self.content_grid_downscale),
                downscaled(width, self.content_grid_downscale),
            ],
            deform_channels: self.deform_channels,
            content_channels: self.content_channels,
            hidden_channels: self.hidden_channels,
            deform_width: self.deform_width,
            deform_depth: self.deform_depth,
            content_width: self.content_width,
            content_depth: self.content_depth,
            max_disp: self.max_disp,
            leaky_slope: self.leaky_slope,
            layer_norm_eps: self.layer_norm_eps,
            seed,
        }
    }

    pub fn resolve_for(&self, video: &VideoVolume, seed: u64) -> ModelConfig {
        let [t, h, w, c] = video.dims();
        self.resolve(t, h, w, c, seed)
    }
}

/// Fully resolved model dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[Gh, Gw]` of `M`.
    pub deform_grid: [usize; 2],
    /// `[Gh, Gw]` of the canonical content grid.
    pub content_grid: [usize; 2],
    pub deform_channels: usize,
    pub content_channels: usize,
    pub hidden_channels: usize,
    pub deform_width: usize,
    pub deform_depth: usize,
    pub content_width: usize,
    pub content_depth: usize,
    pub max_disp: f32,
    pub leaky_slope: f32,
    pub layer_norm_eps: f32,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let dims = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("deform grid height", self.deform_grid[0]),
            ("deform grid width", self.deform_grid[1]),
            ("content grid height", self.content_grid[0]),
            ("content grid width", self.content_grid[1]),
            ("deform channels", self.deform_channels),
            ("content channels", self.content_channels),
            ("hidden channels", self.hidden_channels),
            ("deform width", self.deform_width),
            ("content width", self.content_width),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(FieldError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(FieldError::InvalidConfig(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(self.max_disp >= 0.0) || !(0.0..1.0).contains(&self.leaky_slope) || !(self.layer_norm_eps > 0.0) {
            return Err(FieldError::InvalidConfig(
                "max_disp ≥ 0, leaky_slope ∈ [0,1) and layer_norm_eps > 0 required".into(),
            ));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// One dense layer; hidden layers of the deformation MLP also carry a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: Option<(Tensor<T>, Tensor<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl<T: Scalar> Mlp<T> {
    fn init(rng: &mut ChaCha8Rng, input: usize, width: usize, depth: usize, output: usize, layer_norm: bool) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = input;
        for _ in 0..depth {
            let s = 1.0 / (fan_in as f64).sqrt();
            layers.push(Dense {
                weight: uniform(rng, &[fan_in, width], s),
                bias: uniform(rng, &[width], s),
                norm: layer_norm.then(|| (Tensor::full(&[width], T::one()), Tensor::zeros(&[width]))),
            });
            fan_in = width;
        }
        let s = 1.0 / (fan_in as f64).sqrt();
        layers.push(Dense {
            weight: uniform(rng, &[fan_in, output], s),
            bias: uniform(rng, &[output], s),
            norm: None,
        });
        Self { layers }
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some((g, b)) = &l.norm {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some((g, b)) = &mut l.norm {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    norm: l.norm.as_ref().map(|(g, b)| (g.cast(), b.cast())),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T> {
    /// `Q×Gh×Gw` spatial features.
    pub m_grid: Tensor<T>,
    /// `Q×T` temporal features.
    pub u_vec: Tensor<T>,
    /// `Q → 2 + K`; the first two outputs are the warp.
    pub mlp: Mlp<T>,
    pub max_disp: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentField<T> {
    /// `Qc×Gh×Gw` canonical features.
    pub c_grid: Tensor<T>,
    /// `Qc + K → C`, sigmoid output.
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvrtModel<T = f32> {
    pub dfield: DeformationField<T>,
    pub cfield: ContentField<T>,
    pub config: ModelConfig,
}

/// Per-pixel offsets `(Δx, Δy)` of one frame, stored as `2×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpMap {
    pub frame: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl WarpMap {
    pub fn dx(&self) -> &[f32] {
        &self.data[..self.height * self.width]
    }
    pub fn dy(&self) -> &[f32] {
        &self.data[self.height * self.width..]
    }
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
    pub fn mean_abs(&self) -> f32 {
        self.data.iter().map(|v| v.abs()).sum::<f32>() / self.data.len().max(1) as f32
    }
}

/// Low-rank vs. full-rank size of the spatio-temporal feature volume.
pub fn feature_param_count(q: usize, gh: usize, gw: usize, t: usize) -> (usize, usize) {
    (q * (gh * gw + t), q * gh * gw * t)
}

/// Graph handles for one MLP.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var, Option<(Var, Var)>)>,
}

impl MlpVars {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var, slope: T, eps: T) -> Result<Var, DiffError> {
        let last = self.layers.len() - 1;
        for (i, (w, b, norm)) in self.layers.iter().enumerate() {
            x = g.linear(x, *w, *b)?;
            if i == last {
                break;
            }
            if let Some((gm, bt)) = norm {
                x = g.layer_norm(x, *gm, *bt, eps)?;
            }
            x = g.leaky_relu(x, slope);
        }
        Ok(x)
    }
}

/// Model parameters (and render constants) placed into a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub m_grid: Var,
    pub u_vec: Var,
    dmlp: MlpVars,
    pub c_grid: Var,
    cmlp: MlpVars,
    /// Every parameter in declared order.
    pub params: Vec<Var>,
    pixel_coords: Var,
    deform_coords: Var,
    content_scale: Var,
}

/// Graph outputs of one rendered frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    /// `H·W × C` colour, pixels in row-major order.
    pub rgb: Var,
    /// `H·W × 2` warp in pixels.
    pub warp: Var,
    /// `H·W × K` hidden features.
    pub hidden: Var,
}

fn align_scale(grid: usize, pixels: usize) -> f64 {
    if pixels > 1 {
        (grid.saturating_sub(1)) as f64 / (pixels - 1) as f64
    } else {
        0.0
    }
}

/// Number of tensors per MLP in declared order.
fn mlp_tensor_count(depth: usize, layer_norm: bool) -> usize {
    depth * if layer_norm { 4 } else { 2 } + 2
}

fn bind_mlp(vars: &[Var], depth: usize, layer_norm: bool) -> MlpVars {
    let mut layers = Vec::new();
    let mut i = 0;
    for _ in 0..depth {
        let norm = layer_norm.then(|| (vars[i + 2], vars[i + 3]));
        layers.push((vars[i], vars[i + 1], norm));
        i += if layer_norm { 4 } else { 2 };
    }
    layers.push((vars[i], vars[i + 1], None));
    MlpVars { layers }
}

impl<T: Scalar> ConvrtModel<T> {
    /// Random initialisation; the warp columns of the deformation head start at zero.
    pub fn init(config: &ModelConfig) -> Result<Self, FieldError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let q = config.deform_channels;
        let k = config.hidden_channels;
        let [dgh, dgw] = config.deform_grid;
        let [cgh, cgw] = config.content_grid;

        let m_grid = uniform(&mut rng, &[q, dgh, dgw], 1.0);
        let u_vec = Tensor::full(&[q, config.frames], T::one());
        let mut dmlp = Mlp::init(&mut rng, q, config.deform_width, config.deform_depth, 2 + k, true);
        let head = dmlp.layers.last_mut().unwrap();
        let out = 2 + k;
        for row in head.weight.data_mut().chunks_exact_mut(out) {
            row[0] = T::zero();
            row[1] = T::zero();
        }
        head.bias.data_mut()[0] = T::zero();
        head.bias.data_mut()[1] = T::zero();

        let qc = config.content_channels;
        let c_grid = uniform(&mut rng, &[qc, cgh, cgw], 1.0);
        let cmlp = Mlp::init(&mut rng, qc + k, config.content_width, config.content_depth, config.channels, false);
        Ok(Self {
            dfield: DeformationField {
                m_grid,
                u_vec,
                mlp: dmlp,
                max_disp: T::lit(config.max_disp as f64),
            },
            cfield: ContentField { c_grid, mlp: cmlp },
            config: config.clone(),
        })
    }

    /// Parameters in declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.dfield.m_grid, &self.dfield.u_vec];
        out.extend(self.dfield.mlp.tensors());
        out.push(&self.cfield.c_grid);
        out.extend(self.cfield.mlp.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.dfield.m_grid, &mut self.dfield.u_vec];
        out.extend(self.dfield.mlp.tensors_mut());
        out.push(&mut self.cfield.c_grid);
        out.extend(self.cfield.mlp.tensors_mut());
        out
    }

    /// Human-readable names aligned with [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["deform.m_grid".to_string(), "deform.u_vec".to_string()];
        let mlp_names = |prefix: &str, mlp: &Mlp<T>| {
            let mut v = Vec::new();
            for (i, l) in mlp.layers.iter().enumerate() {
                v.push(format!("{prefix}.{i}.weight"));
                v.push(format!("{prefix}.{i}.bias"));
                if l.norm.is_some() {
                    v.push(format!("{prefix}.{i}.norm_gamma"));
                    v.push(format!("{prefix}.{i}.norm_beta"));
                }
            }
            v
        };
        names.extend(mlp_names("deform.mlp", &self.dfield.mlp));
        names.push("content.c_grid".to_string());
        names.extend(mlp_names("content.mlp", &self.cfield.mlp));
        names
    }

    pub fn total_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// `(Q·(Gh·Gw + T), Q·Gh·Gw·T)` for the deformation feature volume.
    pub fn param_count(&self) -> (usize, usize) {
        let [gh, gw] = self.config.deform_grid;
        feature_param_count(self.config.deform_channels, gh, gw, self.config.frames)
    }

    pub fn cast<U: Scalar>(&self) -> ConvrtModel<U> {
        ConvrtModel {
            dfield: DeformationField {
                m_grid: self.dfield.m_grid.cast(),
                u_vec: self.dfield.u_vec.cast(),
                mlp: self.dfield.mlp.cast(),
                max_disp: U::from_f64(self.dfield.max_disp.to_f64().unwrap()).unwrap(),
            },
            cfield: ContentField {
                c_grid: self.cfield.c_grid.cast(),
                mlp: self.cfield.mlp.cast(),
            },
            config: self.config.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Inserts every parameter as a learnable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundModel {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.param(t.clone())).collect();
        self.bind_vars(g, &vars)
    }

    /// Reuses existing leaves (in declared order) as the model parameters.
    pub fn bind_vars(&self, g: &mut Graph<T>, vars: &[Var]) -> BoundModel {
        let c = &self.config;
        let nd = mlp_tensor_count(c.deform_depth, true);
        let nc = mlp_tensor_count(c.content_depth, false);
        assert_eq!(vars.len(), 3 + nd + nc, "parameter count does not match the model layout");
        let dmlp = bind_mlp(&vars[2..2 + nd], c.deform_depth, true);
        let cmlp = bind_mlp(&vars[3 + nd..], c.content_depth, false);

        let n = c.pixels();
        let mut pix = Vec::with_capacity(2 * n);
        for y in 0..c.height {
            for x in 0..c.width {
                pix.push(T::from_usize(x).unwrap());
                pix.push(T::from_usize(y).unwrap());
            }
        }
        let (dsx, dsy) = (align_scale(c.deform_grid[1], c.width), align_scale(c.deform_grid[0], c.height));
        let dco: Vec<T> = pix
            .chunks_exact(2)
            .flat_map(|p| [p[0] * T::lit(dsx), p[1] * T::lit(dsy)])
            .collect();
        let (csx, csy) = (align_scale(c.content_grid[1], c.width), align_scale(c.content_grid[0], c.height));
        let pixel_coords = g.input(Tensor::new(vec![n, 2], pix).unwrap());
        let deform_coords = g.input(Tensor::new(vec![n, 2], dco).unwrap());
        let content_scale = g.input(Tensor::new(vec![2], vec![T::lit(csx), T::lit(csy)]).unwrap());
        BoundModel {
            m_grid: vars[0],
            u_vec: vars[1],
            dmlp,
            c_grid: vars[2 + nd],
            cmlp,
            params: vars.to_vec(),
            pixel_coords,
            deform_coords,
            content_scale,
        }
    }

    fn check_frame(&self, t: usize) -> Result<(), FieldError> {
        if t >= self.config.frames {
            return Err(FieldError::FrameOutOfRange {
                t,
                frames: self.config.frames,
            });
        }
        Ok(())
    }

    /// `M(coords) ⊙ u_t` on the graph; coords are in deformation-grid units.
    pub fn deform_features_graph(&self, g: &mut Graph<T>, b: &BoundModel, coords: Var, t: usize) -> Result<Var, FieldError> {
        self.check_frame(t)?;
        let m = g.bilinear_sample(b.m_grid, coords)?;
        let ut = g.slice_last(b.u_vec, t, 1)?;
        let ut = g.reshape(ut, &[self.config.deform_channels])?;
        Ok(g.hadamard(m, ut)?)
    }

    /// Warp (`N×2`, pixels, bounded by `max_disp`) and hidden features (`N×K`).
    pub fn warp_hidden_graph(&self, g: &mut Graph<T>, b: &BoundModel, coords: Var, t: usize) -> Result<(Var, Var), FieldError> {
        let v = self.deform_features_graph(g, b, coords, t)?;
        let c = &self.config;
        let out = b
            .dmlp
            .forward(g, v, T::lit(c.leaky_slope as f64), T::lit(c.layer_norm_eps as f64))?;
        let raw = g.slice_last(out, 0, 2)?;
        let bounded = g.tanh(raw);
        let warp = g.affine(bounded, self.dfield.max_disp, T::zero());
        let hidden = g.slice_last(out, 2, c.hidden_channels)?;
        Ok((warp, hidden))
    }

    /// Renders frame `t` on the graph. Hidden features are taken at the
    /// unwarped pixel; content features at the warped one.
    pub fn render_frame_graph(&self, g: &mut Graph<T>, b: &BoundModel, t: usize) -> Result<FrameVars, FieldError> {
        let (warp, hidden) = self.warp_hidden_graph(g, b, b.deform_coords, t)?;
        let moved = g.add(b.pixel_coords, warp)?;
        let coords = g.hadamard(moved, b.content_scale)?;
        let feats = g.bilinear_sample(b.c_grid, coords)?;
        let z = g.concat(feats, hidden)?;
        let c = &self.config;
        let logits = b
            .cmlp
            .forward(g, z, T::lit(c.leaky_slope as f64), T::lit(c.layer_norm_eps as f64))?;
        let rgb = g.sigmoid(logits);
        Ok(FrameVars { rgb, warp, hidden })
    }

    /// Deformation features for grid coordinates `coords: N×2`.
    pub fn sample_deform_features(&self, coords: &Tensor<T>, t: usize) -> Result<Tensor<T>, FieldError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let c = g.input(coords.clone());
        let v = self.deform_features_graph(&mut g, &b, c, t)?;
        Ok(g.value(v).clone())
    }

    /// Warp and hidden features for grid coordinates `coords: N×2`.
    pub fn predict_warp_hidden(&self, coords: &Tensor<T>, t: usize) -> Result<(Tensor<T>, Tensor<T>), FieldError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let c = g.input(coords.clone());
        let (w, h) = self.warp_hidden_graph(&mut g, &b, c, t)?;
        Ok((g.value(w).clone(), g.value(h).clone()))
    }
}

impl ConvrtModel<f32> {
    /// `H×W×C` frame.
    pub fn render_frame(&self, t: usize) -> Result<Vec<f32>, FieldError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let f = self.render_frame_graph(&mut g, &b, t)?;
        Ok(g.value(f.rgb).data().to_vec())
    }

    pub fn render_video(&self) -> Result<VideoVolume, FieldError> {
        let c = &self.config;
        let frames = (0..c.frames).map(|t| self.render_frame(t)).collect::<Result<Vec<_>, _>>()?;
        VideoVolume::from_frames(c.height, c.width, c.channels, &frames).map_err(|e| FieldError::InvalidConfig(e.to_string()))
    }

    /// Rendered warp of frame `t` at every pixel.
    pub fn predict_warp(&self, t: usize) -> Result<WarpMap, FieldError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let (w, _) = self.warp_hidden_graph(&mut g, &b, b.deform_coords, t)?;
        let n = self.config.pixels();
        let d = g.value(w).data();
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            data[i] = d[2 * i];
            data[n + i] = d[2 * i + 1];
        }
        Ok(WarpMap {
            frame: t,
            height: self.config.height,
            width: self.config.width,
            data,
        })
    }

    /// Renders with the bilinear content lookup at the unwarped pixel, i.e. the
    /// canonical content combined with frame `t`'s hidden features.
    pub fn render_frame_unwarped(&self, t: usize) -> Result<Vec<f32>, FieldError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let (_, hidden) = self.warp_hidden_graph(&mut g, &b, b.deform_coords, t)?;
        let coords = g.hadamard(b.pixel_coords, b.content_scale)?;
        let feats = g.bilinear_sample(b.c_grid, coords)?;
        let z = g.concat(feats, hidden)?;
        let c = &self.config;
        let logits = b.cmlp.forward(&mut g, z, c.leaky_slope, c.layer_norm_eps)?;
        let rgb = g.sigmoid(logits);
        Ok(g.value(rgb).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ModelConfig {
        let opts = ModelOptions {
            deform_channels: 4,
            content_channels: 4,
            hidden_channels: 4,
            deform_width: 16,
            content_width: 16,
            ..Default::default()
        };
        opts.resolve(3, 8, 8, 3, seed)
    }

    #[test]
    fn init_warp_is_exactly_zero() {
        let m = ConvrtModel::<f32>::init(&small(1)).unwrap();
        for t in 0..3 {
            let w = m.predict_warp(t).unwrap();
            assert!(w.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn seeds_control_parameters() {
        let a = ConvrtModel::<f32>::init(&small(5)).unwrap();
        let b = ConvrtModel::<f32>::init(&small(5)).unwrap();
        let c = ConvrtModel::<f32>::init(&small(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.dfield.m_grid, c.dfield.m_grid);
        assert_ne!(a.cfield.mlp, c.cfield.mlp);
    }

    #[test]
    fn invalid_dims_rejected() {
        let mut cfg = small(0);
        cfg.hidden_channels = 0;
        assert!(matches!(ConvrtModel::<f32>::init(&cfg), Err(FieldError::InvalidConfig(_))));
    }

    #[test]
    fn deform_features_are_hadamard_products() {
        let mut m = ConvrtModel::<f64>::init(&small(2)).unwrap();
        // constant grid channels; u is Q×T
        let plane = 8 * 8;
        for (i, v) in m.dfield.m_grid.data_mut().iter_mut().enumerate() {
            *v = [2.0, 3.0, 1.0, -1.0][i / plane];
        }
        let u = m.dfield.u_vec.data_mut();
        u[1] = 0.5;
        u[3] = 2.0;
        let coords = Tensor::from_f64(&[1, 2], &[3.25, 4.5]).unwrap();
        let out = m.sample_deform_features(&coords, 0).unwrap();
        assert_eq!(out.data(), &[2.0, 6.0, 1.0, -1.0]);
        let out = m.sample_deform_features(&coords, 1).unwrap();
        assert_eq!(out.data(), &[1.0, 3.0, 1.0, -1.0]);

        m.dfield.m_grid.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let out = m.sample_deform_features(&coords, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            m.sample_deform_features(&coords, 3),
            Err(FieldError::FrameOutOfRange { t: 3, frames: 3 })
        ));
    }

    #[test]
    fn warp_saturates_at_max_disp() {
        let mut m = ConvrtModel::<f32>::init(&small(3)).unwrap();
        let head = m.dfield.mlp.layers.last_mut().unwrap();
        head.bias.data_mut()[0] = 50.0;
        head.bias.data_mut()[1] = -50.0;
        let w = m.predict_warp(0).unwrap();
        assert!(w.dx().iter().all(|&v| v == 3.0));
        assert!(w.dy().iter().all(|&v| v == -3.0));
        assert!(w.max_abs() <= m.config.max_disp);
        let coords = Tensor::from_f64(&[2, 2], &[0.0, 0.0, 7.0, 7.0]).unwrap();
        let (_, hidden) = m.predict_warp_hidden(&coords, 1).unwrap();
        assert!(hidden.is_finite());
        assert_eq!(hidden.shape(), &[2, 4]);
    }

    #[test]
    fn identical_u_gives_identical_frames() {
        let m = ConvrtModel::<f32>::init(&small(4)).unwrap();
        let a = m.render_frame(0).unwrap();
        let b = m.render_frame(2).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_parameters_render_sigmoid_of_bias() {
        let mut m = ConvrtModel::<f32>::init(&small(4)).unwrap();
        for t in m.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let head = m.cfield.mlp.layers.last_mut().unwrap();
        head.bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let f = m.render_frame(1).unwrap();
        let expect: Vec<f32> = [0.5f32, -1.0, 2.0].iter().map(|b| 1.0 / (1.0 + (-b).exp())).collect();
        for px in f.chunks_exact(3) {
            assert_eq!(px, expect.as_slice());
        }
    }

    #[test]
    fn render_video_shape_and_range() {
        let m = ConvrtModel::<f32>::init(&small(8)).unwrap();
        let v = m.render_video().unwrap();
        assert_eq!(v.dims(), [3, 8, 8, 3]);
        assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(v, m.render_video().unwrap());
    }

    #[test]
    fn perturbing_u_changes_only_that_frame() {
        let mut m = ConvrtModel::<f32>::init(&small(9)).unwrap();
        let before: Vec<Vec<f32>> = (0..3).map(|t| m.render_frame(t).unwrap()).collect();
        // u is Q×T; column 1 is frame 1
        let frames = m.config.frames;
        for q in 0..m.config.deform_channels {
            m.dfield.u_vec.data_mut()[q * frames + 1] += 0.7;
        }
        let after: Vec<Vec<f32>> = (0..3).map(|t| m.render_frame(t).unwrap()).collect();
        assert_eq!(before[0], after[0]);
        assert_eq!(before[2], after[2]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn param_counts() {
        assert_eq!(feature_param_count(16, 64, 64, 16), (65_792, 1_048_576));
        assert_eq!(feature_param_count(1, 2, 2, 2), (6, 8));
        for t in 2..20 {
            for g in 1..10 {
                let (lo, full) = feature_param_count(3, g, g + 1, t);
                assert!(lo < full || (g * (g + 1) <= 2 && lo == full), "t={t} g={g}");
            }
        }
        let m = ConvrtModel::<f32>::init(&small(0)).unwrap();
        let (lo, _) = m.param_count();
        let mlp = m.dfield.mlp.param_count();
        assert_eq!(m.dfield.m_grid.numel() + m.dfield.u_vec.numel() + mlp, lo + mlp);
        assert_eq!(m.tensor_names().len(), m.tensors().len());
    }
}
